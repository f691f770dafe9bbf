"""Command-line surface: dataset synthesis, codec/classifier training, analysis.

Every run takes --config (flat key=value text), --seed, and --out, writes the
resolved config plus a manifest.json into the output directory, and returns
exit code 0 on success, 2 on configuration/input errors, 3 on numeric
failure (training divergence or non-finite values).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import tensor as T
from .backend import parallel_map
from .codec import (DivergenceError, codec_train_config_from_flat, decode,
                    export_dataset, load_codec, load_latent_dataset,
                    rd_config_from_flat, train_codec)
from .config import (ConfigError, apply_overrides, config_digest, dump_config,
                     load_config)
from .io import FormatError, read_ppm, write_ppm, write_tsv
from .net import (Net, adopt_pretrained, build, forward_classify, load_net,
                  model_config_from_flat)
from .textures import generate_dataset, load_labels, texture_spec_from_flat
from .train import evaluate, fit, split_samples, train_config_from_flat

log = logging.getLogger("latentclass")


# -- manifest -------------------------------------------------------------------------


def write_manifest(out_dir: str, command: str, cfg: Dict[str, str], seed: int,
                   inputs: Dict[str, str], outputs: Dict[str, str],
                   timings: Dict[str, float]) -> str:
    """One manifest.json per run, recording provenance and wall times."""
    manifest = {
        "command": command,
        "config_digest": config_digest(cfg),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "timings_s": {k: round(v, 4) for k, v in timings.items()},
        "version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _prepare_out(args) -> Tuple[Dict[str, str], int, str]:
    """Load config, resolve seed, create the output dir, dump resolved config."""
    cfg = load_config(args.config) if args.config else {}
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
    return cfg, seed, args.out


def load_corpus(images_dir: str) -> List[Tuple[np.ndarray, int]]:
    """Read a PPM corpus via its labels.tsv as (image, label) pairs."""
    entries = load_labels(images_dir)
    paths = [os.path.join(images_dir, p) for p, _ in entries]
    images = parallel_map(read_ppm, paths)
    return [(img, lab) for img, (_, lab) in zip(images, entries)]


# -- commands ------------------------------------------------------------------------


def cmd_gen_textures(args) -> int:
    cfg, seed, out = _prepare_out(args)
    spec = texture_spec_from_flat(cfg, seed=seed)
    t0 = time.perf_counter()
    entries = generate_dataset(out, spec)
    dt = time.perf_counter() - t0
    write_manifest(out, "gen-textures", cfg, seed, {}, {"corpus": out},
                   {"generate": dt})
    print(f"wrote {len(entries)} images across {spec.num_classes} classes to {out}")
    return 0


def cmd_train_codec(args) -> int:
    cfg, seed, out = _prepare_out(args)
    rd = rd_config_from_flat(cfg)
    tc = codec_train_config_from_flat(cfg, rd)
    corpus = load_corpus(args.images)
    images = np.stack([img for img, _ in corpus])
    resume = os.path.join(out, "codec.lckp")
    resume = resume if os.path.exists(resume) else None
    t0 = time.perf_counter()
    ckpt, rows = train_codec(images, tc, seed, out, config_digest(cfg), resume=resume)
    dt = time.perf_counter() - t0
    write_manifest(out, "train-codec", cfg, seed, {"images": args.images},
                   {"checkpoint": ckpt}, {"train": dt})
    last = rows[-1]
    print(f"codec quality={rd.quality_index} epochs over {len(rows)} rows, "
          f"final bpp={last[2]:.4f} mse={last[3]:.6f} -> {ckpt}")
    return 0


def cmd_export_latents(args) -> int:
    cfg, seed, out = _prepare_out(args)
    rd = rd_config_from_flat(cfg)
    params = load_codec(args.codec, rd)
    corpus = load_corpus(args.images)
    t0 = time.perf_counter()
    summary = export_dataset([img for img, _ in corpus], [lab for _, lab in corpus],
                             params, out)
    timings = {"export": time.perf_counter() - t0}
    outputs = {"latents": out}
    if args.decoded_out:
        os.makedirs(args.decoded_out, exist_ok=True)
        t0 = time.perf_counter()
        samples, _ = load_latent_dataset(out)
        entries = load_labels(args.images)
        with T.no_grad():
            for smp, (name, _) in zip(samples, entries):
                x_hat = decode(smp.y_hat[None], params)
                write_ppm(os.path.join(args.decoded_out, name), x_hat.data[0])
        shutil.copyfile(os.path.join(args.images, "labels.tsv"),
                        os.path.join(args.decoded_out, "labels.tsv"))
        timings["decode"] = time.perf_counter() - t0
        outputs["decoded"] = args.decoded_out
    write_manifest(out, "export-latents", cfg, seed,
                   {"codec": args.codec, "images": args.images}, outputs, timings)
    print(f"exported {int(summary['count'])} latents, mean bpp {summary['mean_bpp']:.4f}, "
          f"mean PSNR {summary['mean_psnr']:.2f} dB")
    return 0


def _load_anchor(run_dir: str) -> Net:
    acfg_flat = load_config(os.path.join(run_dir, "config.txt"))
    acfg_flat.setdefault("model.variant", "resnet_anchor")
    anchor_cfg = model_config_from_flat(acfg_flat)
    net, _ = load_net(os.path.join(run_dir, "best.lckp"), anchor_cfg)
    return net


def _train_classifier_common(args, pixel: bool) -> int:
    cfg, seed, out = _prepare_out(args)
    if pixel:
        cfg.setdefault("model.variant", "resnet_anchor")
    mcfg = model_config_from_flat(cfg)
    if pixel and mcfg.is_latent_input:
        raise ConfigError(f"train-anchor needs a pixel variant, got {mcfg.variant}")
    if not pixel and not mcfg.is_latent_input:
        raise ConfigError(f"train-classifier needs a latent variant, got {mcfg.variant}")
    if pixel:
        samples = load_corpus(args.images)
        inputs = {"images": args.images}
    else:
        samples, _ = load_latent_dataset(args.latents)
        inputs = {"latents": args.latents}
    train_s, val_s = split_samples(samples, args.val_fraction)
    net = build(mcfg, seed=seed)
    tcfg = train_config_from_flat(cfg, seed=seed)
    anchor_dir = getattr(args, "anchor", None)
    if anchor_dir:
        adopted = adopt_pretrained(net, _load_anchor(anchor_dir))
        inputs["anchor"] = anchor_dir
        log.info("adopted %d trunk tensors from %s", adopted, anchor_dir)
    else:
        tcfg.two_phase = False
    t0 = time.perf_counter()
    best, rows = fit(net, train_s, val_s, tcfg, out, config_digest(cfg))
    dt = time.perf_counter() - t0
    top1, per_class, _ = evaluate(net, val_s, tcfg.batch_size)
    best_val = max(r[6] for r in rows)
    write_manifest(out, "train-anchor" if pixel else "train-classifier", cfg, seed,
                   inputs, {"best": best}, {"train": dt})
    print(f"{mcfg.variant}: best val top-1 {best_val:.4f} "
          f"(final-epoch {top1:.4f}) in {dt:.1f}s -> {best}")
    return 0


def cmd_train_anchor(args) -> int:
    return _train_classifier_common(args, pixel=True)


def cmd_train_classifier(args) -> int:
    return _train_classifier_common(args, pixel=False)


def cmd_analyze(args) -> int:
    from . import analysis

    cfg, seed, out = _prepare_out(args)
    if args.what == "sparsity":
        samples, _ = load_latent_dataset(args.latents)
        stats = analysis.sparsity_stats(samples, bins=args.bins)
        path = analysis.write_sparsity_report(out, stats)
        write_manifest(out, "analyze sparsity", cfg, seed,
                       {"latents": args.latents}, {"sparsity": path}, {})
        print(f"{stats.total} (sample, channel) pairs; "
              f"zero-channel fraction {stats.zero_channel_fraction:.4f}; "
              f"mean nonzero fraction {stats.mean_nonzero_fraction:.4f}")
    else:
        pairs = []
        for spec_arg in args.runs:
            latents_dir, sep, run_dir = spec_arg.partition(":")
            if not sep:
                raise ConfigError(f"run spec {spec_arg!r} must be LATENTS_DIR:RUN_DIR")
            pairs.append((latents_dir, run_dir))
        rows = analysis.rate_accuracy_rows(pairs)
        path = os.path.join(out, "rate_accuracy.tsv")
        write_tsv(path, analysis.RATE_ACCURACY_COLUMNS, rows)
        write_manifest(out, "analyze rate-accuracy", cfg, seed,
                       {"runs": ";".join(args.runs)}, {"curve": path}, {})
        for r in rows:
            print(f"bpp {r[0]:.4f}  top1 {r[1]:.4f}  psnr {r[2]:.2f}  ms_ssim {r[3]:.4f}")
    return 0


def cmd_bench(args) -> int:
    from . import analysis

    cfg, seed, out = _prepare_out(args)
    if args.what == "kernels":
        rows = analysis.bench_kernels(args.reps)
        path = os.path.join(out, "bench_kernels.tsv")
        write_tsv(path, analysis.KERNEL_BENCH_COLUMNS, rows)
        write_manifest(out, "bench kernels", cfg, seed, {}, {"bench": path}, {})
        for case, backend, ms in rows:
            print(f"{case:16s} {backend:6s} {ms:8.3f} ms")
        return 0
    rd = rd_config_from_flat(cfg)
    params = load_codec(args.codec, rd)
    anchor = _load_anchor(args.anchor)
    lat_flat = load_config(os.path.join(args.classifier, "config.txt"))
    lat_cfg = model_config_from_flat(lat_flat)
    latent_net, _ = load_net(os.path.join(args.classifier, "best.lckp"), lat_cfg)
    corpus = load_corpus(args.images)
    images = [img for img, _ in corpus[: args.images_limit]]
    t0 = time.perf_counter()
    rows, summary = analysis.bench_pipelines(params, anchor, latent_net, images, args.reps)
    dt = time.perf_counter() - t0
    path = os.path.join(out, "bench_pipelines.tsv")
    write_tsv(path, analysis.BENCH_COLUMNS, rows)
    spath = os.path.join(out, "bench_summary.tsv")
    write_tsv(spath, analysis.BENCH_SUMMARY_COLUMNS, summary)
    write_manifest(out, "bench pipelines", cfg, seed,
                   {"codec": args.codec, "anchor": args.anchor,
                    "classifier": args.classifier, "images": args.images},
                   {"bench": path, "summary": spath}, {"bench": dt})
    for name, ms, _, _ in summary:
        print(f"median {name:12s} {ms:8.3f} ms/image")
    return 0


def cmd_sweep(args) -> int:
    from . import analysis

    cfg, seed, out = _prepare_out(args)
    if args.check_coverage:
        rows = analysis.check_coverage()
        path = os.path.join(out, "coverage.tsv")
        write_tsv(path, ("axis", "config_key", "num_values"), rows)
        write_manifest(out, "sweep ablation", cfg, seed, {}, {"coverage": path}, {})
        for axis, key, n in rows:
            print(f"{axis:16s} -> {key:18s} ({n} values)")
        print(f"all {len(rows)} axes reachable")
        return 0
    if not args.axes or not args.latents:
        raise ConfigError("sweep ablation needs --axes and --latents "
                          "(or --check-coverage)")
    axes = analysis.parse_axes(args.axes)
    samples, _ = load_latent_dataset(args.latents)
    train_s, val_s = split_samples(samples, args.val_fraction)
    anchor = _load_anchor(args.anchor) if args.anchor else None
    t0 = time.perf_counter()
    rows = analysis.run_sweep(cfg, axes, train_s, val_s, out, seed=seed, anchor=anchor)
    dt = time.perf_counter() - t0
    write_manifest(out, "sweep ablation", cfg, seed,
                   {"latents": args.latents, "axes": args.axes},
                   {"sweep": os.path.join(out, "sweep.tsv")}, {"sweep": dt})
    names = list(axes)
    for r in rows:
        cell = " ".join(f"{n}={v}" for n, v in zip(names, r[1 : 1 + len(names)]))
        print(f"cell {r[0]:3d}  {cell}  top1 {r[1 + len(names)]:.4f}")
    return 0


# -- parser -------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", nargs="+", action="extend", metavar="KEY=VALUE",
                   default=[], help="config overrides applied after --config; "
                   "repeatable, each taking one or more KEY=VALUE pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for this run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="latentclass",
        description="Compressed-domain texture classification toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-textures", help="synthesize the texture corpus")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_textures)

    p = sub.add_parser("train-codec", help="train the rate-distortion codec")
    _add_common(p)
    p.add_argument("--images", required=True, help="PPM corpus directory")
    p.set_defaults(fn=cmd_train_codec)

    p = sub.add_parser("export-latents", help="encode a corpus to latent tensors")
    _add_common(p)
    p.add_argument("--codec", required=True, help="codec checkpoint path")
    p.add_argument("--images", required=True)
    p.add_argument("--decoded-out", help="also write decoded PPMs here")
    p.set_defaults(fn=cmd_export_latents)

    p = sub.add_parser("train-anchor", help="train a pixel-domain classifier")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_train_anchor)

    p = sub.add_parser("train-classifier", help="train a latent-domain classifier")
    _add_common(p)
    p.add_argument("--latents", required=True)
    p.add_argument("--anchor", help="anchor run dir for trunk adoption")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("analyze", help="sparsity and rate-accuracy reports")
    asub = p.add_subparsers(dest="what", required=True)
    ps = asub.add_parser("sparsity")
    _add_common(ps)
    ps.add_argument("--latents", required=True)
    ps.add_argument("--bins", type=int, default=20)
    ps.set_defaults(fn=cmd_analyze)
    pr = asub.add_parser("rate-accuracy")
    _add_common(pr)
    pr.add_argument("--runs", nargs="+", required=True,
                    metavar="LATENTS_DIR:RUN_DIR")
    pr.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("bench", help="timing benchmarks")
    bsub = p.add_subparsers(dest="what", required=True)
    pp = bsub.add_parser("pipelines")
    _add_common(pp)
    pp.add_argument("--codec", required=True)
    pp.add_argument("--anchor", required=True, help="anchor run dir")
    pp.add_argument("--classifier", required=True, help="latent classifier run dir")
    pp.add_argument("--images", required=True)
    pp.add_argument("--images-limit", type=int, default=16)
    pp.add_argument("--reps", type=int, default=5)
    pp.set_defaults(fn=cmd_bench)
    pk = bsub.add_parser("kernels")
    _add_common(pk)
    pk.add_argument("--reps", type=int, default=7)
    pk.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="ablation sweeps over config axes")
    ssub = p.add_subparsers(dest="what", required=True)
    pa = ssub.add_parser("ablation")
    _add_common(pa)
    pa.add_argument("--axes", help="e.g. 'cau_mode=scale,affine;r=8,16'")
    pa.add_argument("--latents")
    pa.add_argument("--anchor", help="anchor run dir for trunk adoption")
    pa.add_argument("--val-fraction", type=float, default=0.2)
    pa.add_argument("--check-coverage", action="store_true",
                    help="verify every ablation axis is reachable, then exit")
    pa.set_defaults(fn=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        numeric = "NaN" in str(e) or "Inf" in str(e) or "finite" in str(e)
        print(f"{'numeric failure' if numeric else 'error'}: {e}", file=sys.stderr)
        return 3 if numeric else 2


if __name__ == "__main__":
    sys.exit(main())
