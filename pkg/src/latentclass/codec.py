"""Toy hyperprior image codec.

An analysis transform g_a downsamples 3xHxW images by exactly 16x into a
latent y; a hyper codec (h_a, h_s) produces a per-element scale map sigma for
the conditional Gaussian rate model of the quantized latent y_hat; a
synthesis transform g_s reconstructs the image. Training minimizes
lambda_d * distortion + estimated bits per pixel. The quantized latent and
scale map are the classifier's inputs, so export utilities write them as
LTEN tensor pairs with a TSV manifest.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io as lio
from . import tensor as T
from .backend import parallel_map
from .config import get_float, get_int, get_str
from .params import ParamStore, add_conv
from .tensor import Tensor

log = logging.getLogger("latentclass")

LATENT_CHANNELS = 32
HYPER_CHANNELS = 16
WIDTH = 16
DOWN_FACTOR = 16
LOG_SIGMA_BOUND = 8.0
MIN_LIKELIHOOD = 2.0 ** -24

# Operating points: larger quality index weights distortion more, so rate
# rises and reconstruction error falls monotonically across indices.
LAMBDA_BY_QUALITY = {1: 30.0, 2: 300.0, 3: 3000.0}


@dataclass
class RdConfig:
    quality_index: int = 3
    lambda_d: Optional[float] = None
    distortion: str = "mse"  # mse | ms_ssim
    latent_channels: int = LATENT_CHANNELS
    hyper_channels: int = HYPER_CHANNELS
    width: int = WIDTH

    def __post_init__(self):
        if self.lambda_d is None:
            if self.quality_index not in LAMBDA_BY_QUALITY:
                raise ValueError(
                    f"quality_index {self.quality_index} has no default lambda; "
                    f"known: {sorted(LAMBDA_BY_QUALITY)}"
                )
            self.lambda_d = LAMBDA_BY_QUALITY[self.quality_index]
        if self.lambda_d <= 0:
            raise ValueError(f"lambda_d must be > 0, got {self.lambda_d}")
        if self.distortion not in ("mse", "ms_ssim"):
            raise ValueError(f"distortion must be mse|ms_ssim, got {self.distortion!r}")


def rd_config_from_flat(cfg: Dict[str, str]) -> RdConfig:
    """Build an RdConfig from flat key=value settings (missing keys -> defaults)."""
    d = RdConfig()
    lam = get_float(cfg, "rd.lambda", 0.0)
    return RdConfig(
        quality_index=get_int(cfg, "rd.quality", d.quality_index),
        lambda_d=lam if lam > 0 else None,
        distortion=get_str(cfg, "rd.distortion", d.distortion,
                           choices=("mse", "ms_ssim")),
        latent_channels=get_int(cfg, "rd.latent_channels", d.latent_channels, lo=1),
        hyper_channels=get_int(cfg, "rd.hyper_channels", d.hyper_channels, lo=1),
        width=get_int(cfg, "rd.width", d.width, lo=1),
    )


@dataclass
class LatentSample:
    y_hat: np.ndarray
    sigma_hat: np.ndarray
    label: int
    bpp: float


@dataclass
class EncodeResult:
    y: Tensor
    y_hat: Tensor
    z_hat: Tensor
    sigma_hat: Tensor
    padding: Tuple[int, int]  # rows/cols of reflect padding applied


def build_codec(cfg: RdConfig, seed: int) -> ParamStore:
    """Fresh codec parameters; construction order is fixed for determinism."""
    rng = np.random.default_rng([seed, 0xC0DEC])
    p = ParamStore()
    c, ch, f = cfg.latent_channels, cfg.hyper_channels, cfg.width
    # g_a: four stride-2 5x5 convs, relu between (16x spatial reduction)
    widths = [3, f, f, f, c]
    for i in range(4):
        add_conv(p, rng, f"g_a.conv{i}", widths[i], widths[i + 1], 5)
    # g_s: mirror with nearest-2x upsample before each 5x5 stride-1 conv
    widths = [c, f, f, f, 3]
    for i in range(4):
        add_conv(p, rng, f"g_s.conv{i}", widths[i], widths[i + 1], 5)
    # hyper codec: two stride-2 convs down, mirrored up, exp head for sigma
    add_conv(p, rng, "h_a.conv0", c, f, 5)
    add_conv(p, rng, "h_a.conv1", f, ch, 5)
    add_conv(p, rng, "h_s.conv0", ch, f, 5)
    add_conv(p, rng, "h_s.conv1", f, c, 5)
    # factorized prior: learned per-channel logistic scale for z_hat
    p.add("prior.log_scale", np.zeros(ch, dtype=T.DTYPE))
    return p


# -- transforms ---------------------------------------------------------------


def analysis_transform(params: ParamStore, x: Tensor) -> Tensor:
    t = x
    for i in range(4):
        t = T.conv2d(t, params[f"g_a.conv{i}.weight"], params[f"g_a.conv{i}.bias"],
                     stride=2, padding=2)
        if i < 3:
            t = T.relu(t)
    return t


def synthesis_transform(params: ParamStore, y_hat: Tensor, clamp_output: bool = True) -> Tensor:
    t = y_hat
    for i in range(4):
        t = T.upsample_nearest2x(t)
        t = T.conv2d(t, params[f"g_s.conv{i}.weight"], params[f"g_s.conv{i}.bias"],
                     stride=1, padding=2)
        if i < 3:
            t = T.relu(t)
    return T.clamp(t, 0.0, 1.0) if clamp_output else t


def hyper_analysis(params: ParamStore, y: Tensor) -> Tensor:
    t = T.conv2d(y, params["h_a.conv0.weight"], params["h_a.conv0.bias"], stride=2, padding=2)
    t = T.relu(t)
    return T.conv2d(t, params["h_a.conv1.weight"], params["h_a.conv1.bias"], stride=2, padding=2)


def hyper_synthesis(params: ParamStore, z_hat: Tensor) -> Tensor:
    t = T.upsample_nearest2x(z_hat)
    t = T.conv2d(t, params["h_s.conv0.weight"], params["h_s.conv0.bias"], stride=1, padding=2)
    t = T.relu(t)
    t = T.upsample_nearest2x(t)
    t = T.conv2d(t, params["h_s.conv1.weight"], params["h_s.conv1.bias"], stride=1, padding=2)
    # exp of a bounded log-scale keeps sigma strictly positive and finite
    return T.exp(T.clamp(t, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND))


# -- quantization and rate ------------------------------------------------------


def quantize(t: Tensor, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Eval: round half away from zero. Train: additive uniform noise proxy."""
    if mode == "eval":
        v = t.data
        return Tensor(np.copysign(np.floor(np.abs(v) + 0.5), v).astype(v.dtype))
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantize needs an rng for the noise draw")
        noise = rng.uniform(-0.5, 0.5, size=t.shape).astype(np.float64 if t.dtype == np.float64 else np.float32)
        return T.add(t, Tensor(noise, dtype=t.dtype))
    raise ValueError(f"quantize mode must be train|eval, got {mode!r}")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_LOG2 = 1.0 / math.log(2.0)


def _interval_mass(cdf_hi: Tensor, cdf_lo: Tensor) -> Tensor:
    p = T.add(cdf_hi, T.mul(cdf_lo, -1.0))
    return T.clamp(p, MIN_LIKELIHOOD, 1.0)


def gaussian_rate_bits(symbols: Tensor, sigma: Tensor) -> Tensor:
    """Total bits of symbols under zero-mean Gaussians with scales sigma.

    Bit count of each symbol s is -log2 of the probability mass the Gaussian
    assigns to [s-0.5, s+0.5], floored at 2^-24.
    """
    if sigma.shape != symbols.shape:
        raise ValueError(f"sigma shape {sigma.shape} != symbols shape {symbols.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian rate model requires strictly positive sigma")
    hi = T.erf(T.mul(T.div(T.add(symbols, 0.5), sigma), _INV_SQRT2))
    lo = T.erf(T.mul(T.div(T.add(symbols, -0.5), sigma), _INV_SQRT2))
    p = _interval_mass(T.mul(hi, 0.5), T.mul(lo, 0.5))  # 0.5*(erf_hi - erf_lo)
    return T.mul(T.tsum(T.log(p)), -_INV_LOG2)


def factorized_rate_bits(symbols: Tensor, params: ParamStore) -> Tensor:
    """Total bits under the learned per-channel zero-mean logistic prior."""
    ls = params["prior.log_scale"]
    ch = ls.shape[0]
    caxis = symbols.ndim - 3  # channel axis for (C,h,w) or (B,C,h,w)
    if symbols.shape[caxis] != ch:
        raise ValueError(
            f"symbols have {symbols.shape[caxis]} channels, prior has {ch}"
        )
    shape = [1] * symbols.ndim
    shape[caxis] = ch
    inv_s = T.reshape(T.exp(T.mul(ls, -1.0)), shape)
    hi = T.sigmoid(T.mul(T.add(symbols, 0.5), inv_s))
    lo = T.sigmoid(T.mul(T.add(symbols, -0.5), inv_s))
    p = _interval_mass(hi, lo)
    return T.mul(T.tsum(T.log(p)), -_INV_LOG2)


def rate_bits(symbols: Tensor, prior: str, sigma: Optional[Tensor] = None,
              params: Optional[ParamStore] = None) -> Tensor:
    """Dispatch to the Gaussian (conditioned on sigma) or factorized rate model."""
    if prior == "gaussian":
        if sigma is None:
            raise ValueError("gaussian prior requires sigma")
        return gaussian_rate_bits(symbols, sigma)
    if prior == "factorized":
        if params is None:
            raise ValueError("factorized prior requires codec params")
        return factorized_rate_bits(symbols, params)
    raise ValueError(f"prior must be gaussian|factorized, got {prior!r}")


# -- encode / decode --------------------------------------------------------------


def pad_to_multiple(img: np.ndarray, multiple: int = DOWN_FACTOR) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Reflect-pad (...,H,W) on the bottom/right to the next multiple."""
    h, w = img.shape[-2], img.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
        img = np.pad(img, pad, mode="reflect")
    return img, (ph, pw)


def encode(x, params: ParamStore, mode: str = "eval",
           rng: Optional[np.random.Generator] = None, pad: bool = True) -> EncodeResult:
    """Run the full analysis side: latent, quantized latent, hyper latent, scales."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=T.DTYPE)
    padding = (0, 0)
    if pad:
        data, padding = pad_to_multiple(data)
    elif data.shape[-1] % DOWN_FACTOR or data.shape[-2] % DOWN_FACTOR:
        raise ValueError(
            f"input spatial shape {data.shape[-2:]} not divisible by {DOWN_FACTOR} "
            "and padding is disabled"
        )
    xt = Tensor(data)
    y = analysis_transform(params, xt)
    y_hat = quantize(y, mode, rng)
    z = hyper_analysis(params, y)
    z_hat = quantize(z, mode, rng)
    sigma_hat = hyper_synthesis(params, z_hat)
    # hyper path ceil-divides by 4 then doubles twice, overshooting odd latents
    if sigma_hat.shape[-2:] != y_hat.shape[-2:]:
        sigma_hat = T.crop_spatial(sigma_hat, y_hat.shape[-2], y_hat.shape[-1])
    assert y_hat.shape[-1] * DOWN_FACTOR == data.shape[-1]
    assert y_hat.shape[-2] * DOWN_FACTOR == data.shape[-2]
    assert sigma_hat.shape == y_hat.shape
    return EncodeResult(y, y_hat, z_hat, sigma_hat, padding)


def decode(y_hat, params: ParamStore) -> Tensor:
    """Reconstruct the image from a quantized latent; output clamped to [0,1]."""
    t = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat, dtype=T.DTYPE))
    if t.shape[-3] != params["g_s.conv0.weight"].shape[1]:
        raise ValueError(
            f"latent has {t.shape[-3]} channels, decoder expects "
            f"{params['g_s.conv0.weight'].shape[1]}"
        )
    return synthesis_transform(params, t, clamp_output=True)


# -- distortion metrics ---------------------------------------------------------------


def mse(x: Tensor, x_hat: Tensor) -> Tensor:
    d = T.add(x_hat, T.mul(x, -1.0))
    return T.tmean(T.mul(d, d))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio on [0,1]-scaled images (MAX=1)."""
    err = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2))
    if err == 0.0:
        return float("inf")
    return -10.0 * math.log10(err)


_SSIM_K = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _gaussian_window(dtype=np.float32) -> np.ndarray:
    half = (_SSIM_K - 1) / 2.0
    g = np.exp(-((np.arange(_SSIM_K) - half) ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    return win.reshape(1, 1, _SSIM_K, _SSIM_K).astype(dtype)


def _as_channel_batch(t: Tensor) -> Tensor:
    """(C,H,W) or (B,C,H,W) -> (B*C,1,H,W) so one window filters every channel."""
    if t.ndim == 3:
        c, h, w = t.shape
        return T.reshape(t, (c, 1, h, w))
    b, c, h, w = t.shape
    return T.reshape(t, (b * c, 1, h, w))


def _ssim_terms(x: Tensor, y: Tensor) -> Tuple[Tensor, Tensor]:
    """Mean luminance term l and contrast-structure term cs over valid windows."""
    win = Tensor(_gaussian_window(np.float64 if x.dtype == np.float64 else np.float32))
    xb, yb = _as_channel_batch(x), _as_channel_batch(y)

    def blur(t):
        return T.conv2d(t, win, None, stride=1, padding=0)

    mu_x, mu_y = blur(xb), blur(yb)
    mu_x2, mu_y2, mu_xy = T.mul(mu_x, mu_x), T.mul(mu_y, mu_y), T.mul(mu_x, mu_y)
    sig_x = T.add(blur(T.mul(xb, xb)), T.mul(mu_x2, -1.0))
    sig_y = T.add(blur(T.mul(yb, yb)), T.mul(mu_y2, -1.0))
    sig_xy = T.add(blur(T.mul(xb, yb)), T.mul(mu_xy, -1.0))
    l_map = T.div(T.add(T.mul(mu_xy, 2.0), _SSIM_C1), T.add(T.add(mu_x2, mu_y2), _SSIM_C1))
    cs_map = T.div(T.add(T.mul(sig_xy, 2.0), _SSIM_C2), T.add(T.add(sig_x, sig_y), _SSIM_C2))
    return T.tmean(T.mul(l_map, cs_map)), T.tmean(cs_map)


def ssim(x, y) -> Tensor:
    """Structural similarity with an 11x11 Gaussian window, valid windows only."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.DTYPE))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=T.DTYPE))
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[-1], x.shape[-2]) < _SSIM_K:
        raise ValueError(f"ssim needs spatial extent >= {_SSIM_K}, got {x.shape[-2:]}")
    full, _ = _ssim_terms(x, y)
    return full


def ms_ssim_scales(h: int, w: int) -> int:
    """Largest scale count k <= 5 with min(H,W)/2^(k-1) still >= the window size."""
    n = 1
    while n < 5 and min(h, w) // (2 ** n) >= _SSIM_K:
        n += 1
    return n


def ms_ssim(x, y) -> Tensor:
    """Multi-scale SSIM; weights renormalized when the image supports < 5 scales."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.DTYPE))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=T.DTYPE))
    if x.shape != y.shape:
        raise ValueError(f"ms_ssim shape mismatch: {x.shape} vs {y.shape}")
    n = ms_ssim_scales(x.shape[-2], x.shape[-1])
    weights = np.asarray(MS_SSIM_WEIGHTS[:n], dtype=np.float64)
    weights = weights / weights.sum()
    if n < 5:
        log.debug("ms_ssim using %d scales for %s input", n, x.shape[-2:])
    result = None
    for i in range(n):
        if i == n - 1:
            full, _ = _ssim_terms(x, y)
            term = T.power(T.clamp(full, 1e-6, 2.0), weights[i])
        else:
            _, cs = _ssim_terms(x, y)
            term = T.power(T.clamp(cs, 1e-6, 2.0), weights[i])
            x, y = T.avg_pool2d(x, 2), T.avg_pool2d(y, 2)
        result = term if result is None else T.mul(result, term)
    return result


# -- RD objective -----------------------------------------------------------------


def rd_loss(x: Tensor, x_hat: Tensor, y_hat: Tensor, z_hat: Tensor,
            sigma_hat: Tensor, cfg: RdConfig, params: ParamStore) -> Tensor:
    """lambda_d * distortion + total estimated bits per original pixel."""
    if cfg.distortion == "mse":
        dist = mse(x, x_hat)
    else:
        dist = T.add(Tensor(np.array(1.0, dtype=x.dtype)), T.mul(ms_ssim(x, x_hat), -1.0))
    bits = T.add(gaussian_rate_bits(y_hat, sigma_hat), factorized_rate_bits(z_hat, params))
    num_pixels = x.shape[-1] * x.shape[-2]
    if x.ndim == 4:
        num_pixels *= x.shape[0]
    return T.add(T.mul(dist, cfg.lambda_d), T.mul(bits, 1.0 / num_pixels))


# -- dataset export -----------------------------------------------------------------


def compress_sample(img: np.ndarray, label: int, params: ParamStore) -> LatentSample:
    """Eval-mode single-image compression to a classifier input record."""
    with T.no_grad():
        res = encode(img, params, mode="eval")
        bits = T.add(
            gaussian_rate_bits(res.y_hat, res.sigma_hat),
            factorized_rate_bits(res.z_hat, params),
        )
    bpp = float(bits.data) / (img.shape[-1] * img.shape[-2])
    return LatentSample(res.y_hat.data, res.sigma_hat.data, int(label), bpp)


def export_dataset(images: Sequence[np.ndarray], labels: Sequence[int],
                   params: ParamStore, out_dir: str) -> Dict[str, float]:
    """Compress every image; write NNN.y.lten / NNN.sigma.lten pairs + manifest.tsv.

    Returns summary statistics (also written to summary.tsv): sample count,
    mean bpp, mean PSNR and mean MS-SSIM of the eval-mode round trip.
    """
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    os.makedirs(out_dir, exist_ok=True)

    def job(idx_img):
        i, (img, label) = idx_img
        sample = compress_sample(img, label, params)
        with T.no_grad():
            x_hat = decode(sample.y_hat, params).data
        ph, pw = pad_to_multiple(np.asarray(img))[1]
        if ph or pw:
            x_hat = x_hat[..., : img.shape[-2], : img.shape[-1]]
        err = float(mse(Tensor(np.asarray(img, dtype=T.DTYPE)), Tensor(x_hat)).data)
        q = float(ms_ssim(np.asarray(img, dtype=T.DTYPE), x_hat).data)
        return i, sample, err, psnr(img, x_hat), q

    results = parallel_map(job, enumerate(zip(images, labels)))
    rows = []
    errs, psnrs, quals = [], [], []
    for i, sample, err, p, q in results:
        stem = f"{i:04d}"
        lio.write_lten(os.path.join(out_dir, f"{stem}.y.lten"), sample.y_hat)
        lio.write_lten(os.path.join(out_dir, f"{stem}.sigma.lten"), sample.sigma_hat)
        rows.append((f"{stem}.y.lten", sample.label, sample.bpp))
        errs.append(err)
        psnrs.append(p)
        quals.append(q)
    lio.write_tsv(os.path.join(out_dir, "manifest.tsv"), ("path", "label", "bpp"), rows)
    summary = {
        "count": len(rows),
        "mean_bpp": float(np.mean([r[2] for r in rows])) if rows else 0.0,
        "mean_mse": float(np.mean(errs)) if errs else 0.0,
        "mean_psnr": float(np.mean(psnrs)) if psnrs else 0.0,
        "mean_ms_ssim": float(np.mean(quals)) if quals else 0.0,
    }
    lio.write_tsv(
        os.path.join(out_dir, "summary.tsv"),
        ("count", "mean_bpp", "mean_mse", "mean_psnr", "mean_ms_ssim"),
        [tuple(summary[k] for k in
               ("count", "mean_bpp", "mean_mse", "mean_psnr", "mean_ms_ssim"))],
    )
    return summary


def load_latent_dataset(dir_path: str) -> Tuple[List[LatentSample], Dict[str, float]]:
    """Read an exported latent dataset back into memory."""
    _, rows = lio.read_tsv(os.path.join(dir_path, "manifest.tsv"))
    samples = []
    for row in rows:
        y_path = os.path.join(dir_path, row["path"])
        sigma_path = y_path[: -len(".y.lten")] + ".sigma.lten"
        samples.append(
            LatentSample(lio.read_lten(y_path), lio.read_lten(sigma_path),
                         int(row["label"]), float(row["bpp"]))
        )
    summary: Dict[str, float] = {}
    summary_path = os.path.join(dir_path, "summary.tsv")
    if os.path.exists(summary_path):
        _, srows = lio.read_tsv(summary_path)
        summary = {k: float(v) for k, v in srows[0].items()}
    return samples, summary


# -- training ---------------------------------------------------------------------


@dataclass
class CodecTrainConfig:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    eval_subset: int = 16  # images used for the per-epoch metric row
    rd: RdConfig = field(default_factory=RdConfig)


def codec_train_config_from_flat(cfg: Dict[str, str], rd: RdConfig) -> CodecTrainConfig:
    d = CodecTrainConfig()
    return CodecTrainConfig(
        epochs=get_int(cfg, "codec.epochs", d.epochs, lo=1),
        batch_size=get_int(cfg, "codec.batch_size", d.batch_size, lo=1),
        lr=get_float(cfg, "codec.lr", d.lr),
        eval_subset=get_int(cfg, "codec.eval_subset", d.eval_subset, lo=1),
        rd=rd,
    )


class AdamState:
    """First/second moment buffers plus step counter, checkpoint-serializable."""

    def __init__(self, params: ParamStore):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"__opt__.m.{n}": a for n, a in self.m.items()}
        out.update({f"__opt__.v.{n}": a for n, a in self.v.items()})
        out["__opt__.t"] = np.array([float(self.t)], dtype=np.float32)
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n] = np.ascontiguousarray(tensors[f"__opt__.m.{n}"], dtype=np.float32)
            self.v[n] = np.ascontiguousarray(tensors[f"__opt__.v.{n}"], dtype=np.float32)
        self.t = int(round(float(tensors["__opt__.t"][0])))


def adam_step(params: ParamStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for n, t in params.trainable_items():
        g = t.grad
        if g is None:
            continue
        m = state.m[n]
        v = state.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class DivergenceError(RuntimeError):
    """Training loss went non-finite; the last good checkpoint was preserved."""


def _epoch_metrics(params: ParamStore, images: np.ndarray, cfg: CodecTrainConfig) -> Tuple[float, float, float]:
    """Eval-mode (bpp, mse, ms_ssim) means over a fixed image subset."""
    subset = images[: min(cfg.eval_subset, len(images))]
    bpps, errs, quals = [], [], []
    with T.no_grad():
        for img in subset:
            res = encode(img, params, mode="eval")
            bits = T.add(
                gaussian_rate_bits(res.y_hat, res.sigma_hat),
                factorized_rate_bits(res.z_hat, params),
            )
            x_hat = decode(res.y_hat, params)
            bpps.append(float(bits.data) / (img.shape[-1] * img.shape[-2]))
            errs.append(float(np.mean((x_hat.data - img) ** 2)))
            quals.append(float(ms_ssim(Tensor(img), x_hat).data))
    return float(np.mean(bpps)), float(np.mean(errs)), float(np.mean(quals))


def train_codec(
    images: np.ndarray,
    cfg: CodecTrainConfig,
    seed: int,
    out_dir: str,
    config_digest: str = "",
    resume: Optional[str] = None,
) -> Tuple[str, List[Tuple[int, float, float, float, float]]]:
    """Optimize the RD objective with Adam; checkpoint per epoch.

    Returns (checkpoint path, per-epoch metric rows). The metric TSV has one
    row per completed epoch: epoch, loss, bpp, mse, ms_ssim. RNG streams are
    derived from (seed, epoch, step), so resuming from the epoch-k checkpoint
    reproduces epoch k+1 bit-exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    params = build_codec(cfg.rd, seed)
    opt = AdamState(params)
    start_epoch = 0
    if resume is not None:
        ck = lio.read_checkpoint(resume)
        params.load_state_tensors(ck.tensors)
        opt.load_tensors(ck.tensors)
        start_epoch = ck.epoch + 1
        log.info("resumed codec training from %s at epoch %d", resume, start_epoch)

    n = len(images)
    if n == 0:
        raise ValueError("cannot train a codec on an empty image set")
    ckpt_path = os.path.join(out_dir, "codec.lckp")
    metrics_path = os.path.join(out_dir, "codec_metrics.tsv")
    rows: List[Tuple[int, float, float, float, float]] = []

    def save(epoch: int) -> None:
        tensors = params.state_tensors()
        tensors.update(opt.to_tensors())
        lio.write_checkpoint(ckpt_path, lio.Checkpoint(config_digest, "codec", epoch, tensors))

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        epoch_losses = []
        for step in range(0, n, cfg.batch_size):
            idx = order[step : step + cfg.batch_size]
            batch = np.ascontiguousarray(images[idx])
            rng_step = np.random.default_rng([seed, epoch, step + 1])
            x = Tensor(batch)
            y = analysis_transform(params, x)
            y_hat = quantize(y, "train", rng_step)
            z = hyper_analysis(params, y)
            z_hat = quantize(z, "train", rng_step)
            sigma_hat = hyper_synthesis(params, z_hat)
            if sigma_hat.shape[-2:] != y_hat.shape[-2:]:
                sigma_hat = T.crop_spatial(sigma_hat, y_hat.shape[-2], y_hat.shape[-1])
            x_hat = synthesis_transform(params, y_hat, clamp_output=False)
            loss = rd_loss(x, x_hat, y_hat, z_hat, sigma_hat, cfg.rd, params)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"codec training diverged at epoch {epoch}: loss is non-finite; "
                    f"last good checkpoint: {ckpt_path if epoch > start_epoch else 'none'}"
                )
            params.zero_grads()
            T.backward(loss)
            adam_step(params, opt, cfg.lr)
            epoch_losses.append(float(loss.data))
        bpp, err, qual = _epoch_metrics(params, images, cfg)
        rows.append((epoch, float(np.mean(epoch_losses)), bpp, err, qual))
        save(epoch)
        lio.write_tsv(metrics_path, ("epoch", "loss", "bpp", "mse", "ms_ssim"), rows)
        log.info("codec epoch %d: loss %.4f bpp %.4f mse %.5f ms_ssim %.4f",
                 epoch, rows[-1][1], bpp, err, qual)
    return ckpt_path, rows


def load_codec(ckpt_path: str, cfg: RdConfig) -> ParamStore:
    params = build_codec(cfg, seed=0)
    ck = lio.read_checkpoint(ckpt_path)
    params.load_state_tensors(ck.tensors)
    return params
