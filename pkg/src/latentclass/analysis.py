"""Post-hoc analysis: latent sparsity, rate-accuracy curves, timing, ablations.

Sparsity reduces every (sample, channel) plane to its nonzero fraction and
histograms those fractions over equal-width bins on [0,1]. Rate-accuracy
joins each run's dataset summary (mean bpp/PSNR/MS-SSIM) with its best
validation top-1. Pipeline benchmarking times decode-then-pixel-inference
against direct latent inference per image, with encode cost reported
separately. The ablation sweep crosses config axes over a shared seed.
"""

from __future__ import annotations

import itertools
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .codec import LatentSample, decode, encode
from .config import ConfigError
from .io import read_tsv, write_tsv
from .net import Net, forward_classify, model_config_from_flat
from .params import ParamStore
from .tensor import Tensor

log = logging.getLogger("latentclass")


# -- sparsity ------------------------------------------------------------------------


@dataclass
class SparsityStats:
    bin_edges: np.ndarray        # bins+1 edges on [0,1]
    counts: np.ndarray           # per-bin (sample, channel) counts
    num_samples: int
    num_channels: int
    zero_channel_fraction: float  # channels with no nonzero value at all
    mean_nonzero_fraction: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def sparsity_stats(samples: Sequence[LatentSample], bins: int = 20) -> SparsityStats:
    """Histogram of per-(sample, channel) nonzero fractions; zeros counted exactly."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not samples:
        raise ValueError("no latent samples to analyze")
    fractions = []
    zero_channels = 0
    for smp in samples:
        y = smp.y_hat
        plane = y.reshape(y.shape[0], -1)
        nz = np.count_nonzero(plane, axis=1)
        zero_channels += int(np.sum(nz == 0))
        fractions.append(nz / plane.shape[1])
    frac = np.concatenate(fractions)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((frac * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return SparsityStats(
        bin_edges=edges,
        counts=counts,
        num_samples=len(samples),
        num_channels=samples[0].y_hat.shape[0],
        zero_channel_fraction=zero_channels / frac.size,
        mean_nonzero_fraction=float(frac.mean()),
    )


SPARSITY_COLUMNS = ("bin_lo", "bin_hi", "count")
SPARSITY_SUMMARY_COLUMNS = ("num_samples", "num_channels", "total",
                            "zero_channel_fraction", "mean_nonzero_fraction")


def write_sparsity_report(out_dir: str, stats: SparsityStats) -> str:
    os.makedirs(out_dir, exist_ok=True)
    rows = [(stats.bin_edges[i], stats.bin_edges[i + 1], int(stats.counts[i]))
            for i in range(len(stats.counts))]
    path = os.path.join(out_dir, "sparsity.tsv")
    write_tsv(path, SPARSITY_COLUMNS, rows)
    write_tsv(os.path.join(out_dir, "sparsity_summary.tsv"), SPARSITY_SUMMARY_COLUMNS,
              [(stats.num_samples, stats.num_channels, stats.total,
                stats.zero_channel_fraction, stats.mean_nonzero_fraction)])
    return path


# -- rate-accuracy ------------------------------------------------------------------


RATE_ACCURACY_COLUMNS = ("bpp", "top1", "psnr", "ms_ssim", "latents_dir", "run_dir")


def rate_accuracy_rows(pairs: Sequence[Tuple[str, str]]) -> List[tuple]:
    """Join (latents_dir, classifier_run_dir) pairs into rows sorted by bpp.

    The latents dir must hold the exporter's summary.tsv; the run dir the
    trainer's metrics.tsv. top1 is the best validation accuracy of the run.
    """
    if len(pairs) < 2:
        raise ValueError("rate-accuracy needs at least 2 runs at distinct qualities")
    rows = []
    for latents_dir, run_dir in pairs:
        _, srows = read_tsv(os.path.join(latents_dir, "summary.tsv"))
        summary = srows[0]
        _, mrows = read_tsv(os.path.join(run_dir, "metrics.tsv"))
        if not mrows:
            raise ValueError(f"{run_dir}: metrics.tsv has no rows")
        top1 = max(float(r["val_acc"]) for r in mrows)
        rows.append((float(summary["mean_bpp"]), top1, float(summary["mean_psnr"]),
                     float(summary["mean_ms_ssim"]), latents_dir, run_dir))
    rows.sort(key=lambda r: r[0])
    accs = [r[1] for r in rows]
    if any(b < a for a, b in zip(accs, accs[1:])):
        log.warning("rate-accuracy: top-1 not non-decreasing in bpp: %s", accs)
    return rows


# -- pipeline benchmark ------------------------------------------------------------


BENCH_COLUMNS = ("image", "rep", "encode_ms", "decode_pixel_ms", "latent_ms")
BENCH_SUMMARY_COLUMNS = ("pipeline", "median_ms", "images", "repetitions")


def _ms(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def bench_pipelines(codec_params: ParamStore, pixel_net: Net, latent_net: Net,
                    images: Sequence[np.ndarray], repetitions: int = 5
                    ) -> Tuple[List[tuple], List[tuple]]:
    """Time decode-then-pixel-inference vs direct latent inference per image.

    Returns (per-(image, rep) rows, summary rows). The latent pipeline never
    invokes the decoder; encode cost is reported as its own column since a
    deployment encodes once regardless of which classifier consumes the
    result. Three warm-up iterations run before measurement.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    if not images:
        raise ValueError("no images to benchmark")
    if not latent_net.cfg.is_latent_input or pixel_net.cfg.is_latent_input:
        raise ValueError("need one pixel-domain net and one latent-domain net")

    def run_encode(img):
        return encode(img[None], codec_params, mode="eval")

    def run_decode_pixel(enc):
        x_hat = decode(enc.y_hat, codec_params)
        return forward_classify(pixel_net, x_hat.data, mode="eval")

    def run_latent(enc):
        sg = enc.sigma_hat.data if latent_net.cfg.head == "y_and_sigma" else None
        return forward_classify(latent_net, enc.y_hat.data, sg, mode="eval")

    with T.no_grad():
        warm = run_encode(images[0])
        for _ in range(3):
            run_decode_pixel(warm)
            run_latent(warm)
        rows = []
        for i, img in enumerate(images):
            for rep in range(repetitions):
                t_enc = _ms(lambda: run_encode(img))
                enc = run_encode(img)
                t_a = _ms(lambda: run_decode_pixel(enc))
                t_b = _ms(lambda: run_latent(enc))
                rows.append((i, rep, t_enc, t_a, t_b))
    med = lambda k: float(np.median([r[k] for r in rows]))
    summary = [("encode", med(2), len(images), repetitions),
               ("decode_pixel", med(3), len(images), repetitions),
               ("latent", med(4), len(images), repetitions)]
    return rows, summary


# -- kernel benchmark ---------------------------------------------------------------


KERNEL_BENCH_COLUMNS = ("case", "backend", "median_ms")

_KERNEL_CASES = (
    ("stem_5x5_s2", (2, 3, 64, 64), (32, 3, 5, 5), 2, 2),
    ("mid_3x3_s1", (2, 64, 8, 8), (64, 64, 3, 3), 1, 1),
    ("wide_1x1_s1", (2, 128, 4, 4), (256, 128, 1, 1), 1, 0),
)


def bench_kernels(repetitions: int = 7) -> List[tuple]:
    """Median forward-conv time per backend on representative shapes."""
    from . import kernels_numpy
    from .backend import HAS_NUMBA

    impls = {"numpy": kernels_numpy.conv2d_fwd}
    if HAS_NUMBA:
        from . import kernels_numba
        impls["numba"] = kernels_numba.conv2d_fwd
    rows = []
    rng = np.random.default_rng(0)
    for case, xshape, wshape, stride, pad in _KERNEL_CASES:
        x = rng.normal(0, 1, xshape).astype(np.float32)
        w = rng.normal(0, 0.1, wshape).astype(np.float32)
        for backend, fn in impls.items():
            fn(x, w, stride, pad)  # warm-up (and JIT compile)
            times = [_ms(lambda: fn(x, w, stride, pad)) for _ in range(repetitions)]
            rows.append((case, backend, float(np.median(times))))
    return rows


# -- ablation sweep ----------------------------------------------------------------


# axis -> (flat config key, values accepted by the model builder)
SWEEP_AXES: Dict[str, Tuple[str, Tuple[str, ...]]] = {
    "variant": ("model.variant", ("cresnet", "fa_cresnet")),
    "input": ("model.head", ("y_only", "y_and_sigma")),
    "fa_position": ("model.fa_position", ("pre", "post")),
    "cau_position": ("cau.position", ("pre", "skip", "inner", "post")),
    "cau_mode": ("cau.mode", ("scale", "bias", "affine")),
    "pooling": ("cau.pooling", ("max", "avg", "max_and_avg",
                                "att_shared", "att_independent")),
    "r": ("cau.r", ("4", "8", "16", "32")),
    "feu_n": ("feu.n", ("2", "3", "4")),
    "enabled_units": ("fa.enabled_units", ("cau_only", "feu_only", "both", "none")),
}


def check_coverage() -> List[Tuple[str, str, int]]:
    """Verify every sweep axis maps to a config key the model builder accepts."""
    rows = []
    for axis, (key, values) in SWEEP_AXES.items():
        for v in values:
            model_config_from_flat({key: v})  # raises if unreachable
        rows.append((axis, key, len(values)))
    return rows


def parse_axes(text: str) -> Dict[str, List[str]]:
    """Parse 'axis=v1,v2;axis2=v3' into an ordered axis -> values mapping."""
    axes: Dict[str, List[str]] = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"sweep axis {part!r} is not of the form axis=v1,v2")
        axis, _, vals = part.partition("=")
        axis = axis.strip()
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; "
                              f"choose from {sorted(SWEEP_AXES)}")
        allowed = SWEEP_AXES[axis][1]
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"sweep axis {axis!r} has no values")
        for v in values:
            if v not in allowed:
                raise ConfigError(f"value {v!r} outside axis {axis!r} enum {allowed}")
        if axis in axes:
            raise ConfigError(f"sweep axis {axis!r} listed twice")
        axes[axis] = values
    if not axes:
        raise ConfigError("no sweep axes given")
    return axes


def sweep_cells(axes: Dict[str, List[str]]) -> List[Dict[str, str]]:
    """Cross product of axis values, in listed order."""
    names = list(axes)
    return [dict(zip(names, combo))
            for combo in itertools.product(*(axes[n] for n in names))]


SWEEP_COLUMNS_BASE = ("cell",)


def run_sweep(base_cfg: Dict[str, str], axes: Dict[str, List[str]],
              train_samples: Sequence[LatentSample], val_samples: Sequence[LatentSample],
              out_dir: str, seed: int = 0,
              anchor: Optional[Net] = None) -> List[tuple]:
    """Train one classifier per cell with a shared seed; one accuracy row each."""
    from .net import adopt_pretrained, build
    from .train import evaluate, fit, train_config_from_flat

    os.makedirs(out_dir, exist_ok=True)
    cells = sweep_cells(axes)
    names = list(axes)
    columns = SWEEP_COLUMNS_BASE + tuple(names) + ("val_top1", "seconds")
    rows = []
    for ci, cell in enumerate(cells):
        cfg = dict(base_cfg)
        for axis, value in cell.items():
            cfg[SWEEP_AXES[axis][0]] = value
        mcfg = model_config_from_flat(cfg)
        net = build(mcfg, seed=seed)
        if anchor is not None and mcfg.is_latent_input:
            adopt_pretrained(net, anchor)
        tcfg = train_config_from_flat(cfg, seed=seed)
        if anchor is None:
            tcfg.two_phase = False
        t0 = time.perf_counter()
        cell_dir = os.path.join(out_dir, f"cell{ci:03d}")
        fit(net, train_samples, val_samples, tcfg, cell_dir)
        top1, _, _ = evaluate(net, val_samples, tcfg.batch_size)
        secs = time.perf_counter() - t0
        rows.append((ci,) + tuple(cell[n] for n in names) + (top1, secs))
        log.info("sweep cell %d/%d %s -> top1 %.3f (%.1fs)",
                 ci + 1, len(cells), cell, top1, secs)
    write_tsv(os.path.join(out_dir, "sweep.tsv"), columns, rows)
    return rows
