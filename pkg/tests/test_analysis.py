"""Analysis tests: sparsity histograms, rate-accuracy joins, benchmarks, sweeps."""

import logging

import numpy as np
import pytest

from latentclass.analysis import (SWEEP_AXES, SparsityStats, bench_kernels,
                                  bench_pipelines, check_coverage, parse_axes,
                                  rate_accuracy_rows, run_sweep, sparsity_stats,
                                  sweep_cells, write_sparsity_report)
from latentclass.codec import LatentSample, RdConfig, build_codec
from latentclass.config import ConfigError
from latentclass.fa import CauConfig, FaConfig, FeuConfig
from latentclass.io import read_tsv, write_tsv
from latentclass.net import ModelConfig, build
from latentclass.train import METRIC_COLUMNS


def sample_with_fractions(fractions, hw=4):
    """One LatentSample whose channel c has fractions[c] of its values nonzero."""
    planes = []
    for f in fractions:
        plane = np.zeros(hw * hw, dtype=np.float32)
        plane[: int(round(f * hw * hw))] = 1.0
        planes.append(plane.reshape(hw, hw))
    y = np.stack(planes)
    return LatentSample(y, np.ones_like(y), 0, 0.1)


# -- sparsity -------------------------------------------------------------------


def test_sparsity_stats_hand_case():
    samples = [sample_with_fractions([0.0, 0.25, 0.5, 1.0]),
               sample_with_fractions([0.0, 0.0, 0.0, 0.0])]
    stats = sparsity_stats(samples, bins=4)
    np.testing.assert_allclose(stats.bin_edges, [0.0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(stats.counts, [5, 1, 1, 1])
    assert stats.total == 8
    assert stats.num_samples == 2 and stats.num_channels == 4
    assert stats.zero_channel_fraction == pytest.approx(5 / 8)
    assert stats.mean_nonzero_fraction == pytest.approx(1.75 / 8)


def test_sparsity_stats_validation():
    with pytest.raises(ValueError, match="bins"):
        sparsity_stats([sample_with_fractions([1.0])], bins=0)
    with pytest.raises(ValueError, match="no latent samples"):
        sparsity_stats([])


def test_sparsity_report_round_trip(tmp_path):
    stats = sparsity_stats([sample_with_fractions([0.0, 1.0])], bins=5)
    path = write_sparsity_report(str(tmp_path), stats)
    cols, rows = read_tsv(path)
    assert cols == ["bin_lo", "bin_hi", "count"]
    assert sum(int(r["count"]) for r in rows) == stats.total
    _, srows = read_tsv(str(tmp_path / "sparsity_summary.tsv"))
    assert float(srows[0]["zero_channel_fraction"]) == pytest.approx(0.5)


# -- rate-accuracy ----------------------------------------------------------------


def fake_pair(base, tag, bpp, accs):
    latents = base / f"latents_{tag}"
    run = base / f"run_{tag}"
    latents.mkdir()
    run.mkdir()
    write_tsv(str(latents / "summary.tsv"),
              ("mean_bpp", "mean_psnr", "mean_ms_ssim"), [(bpp, 30.0, 0.9)])
    rows = [(e, "full_finetune", 0.1, 0.1, 1.0, 0.5, acc)
            for e, acc in enumerate(accs)]
    write_tsv(str(run / "metrics.tsv"), METRIC_COLUMNS, rows)
    return str(latents), str(run)


def test_rate_accuracy_rows_sorted_best_val(tmp_path):
    hi = fake_pair(tmp_path, "hi", 0.8, [0.5, 0.9, 0.8])
    lo = fake_pair(tmp_path, "lo", 0.2, [0.4, 0.6])
    rows = rate_accuracy_rows([hi, lo])
    assert [r[0] for r in rows] == [0.2, 0.8]
    assert [r[1] for r in rows] == [0.6, 0.9]
    assert rows[0][4:] == lo


def test_rate_accuracy_rows_warns_on_inversion(tmp_path, caplog):
    a = fake_pair(tmp_path, "a", 0.2, [0.9])
    b = fake_pair(tmp_path, "b", 0.8, [0.5])
    with caplog.at_level(logging.WARNING, logger="latentclass"):
        rate_accuracy_rows([a, b])
    assert any("non-decreasing" in r.message for r in caplog.records)


def test_rate_accuracy_rows_validation(tmp_path):
    a = fake_pair(tmp_path, "a", 0.2, [0.9])
    with pytest.raises(ValueError, match="at least 2"):
        rate_accuracy_rows([a])
    empty = fake_pair(tmp_path, "e", 0.5, [])
    with pytest.raises(ValueError, match="no rows"):
        rate_accuracy_rows([a, empty])


# -- pipeline benchmark --------------------------------------------------------------


def small_model(variant):
    return build(ModelConfig(
        variant=variant,
        trunk_channels=(8, 12, 16),
        layer_blocks=(1, 1, 1),
        stem_channels=8,
        y_head_channels=8,
        sigma_head_channels=4,
        latent_channels=8,
        feu_n_per_layer=(1, 1, 1),
        fa=FaConfig(cau=CauConfig(r=2), feu=FeuConfig(n=1)),
    ), 0)


def test_bench_pipelines_shapes_and_summary(rng):
    codec = build_codec(RdConfig(latent_channels=8, hyper_channels=4, width=8), 0)
    pixel = small_model("resnet_anchor")
    latent = small_model("fa_cresnet")
    images = [rng.random((3, 32, 32)).astype(np.float32)]
    rows, summary = bench_pipelines(codec, pixel, latent, images, repetitions=2)
    assert len(rows) == 2 and all(len(r) == 5 for r in rows)
    assert all(t > 0 for r in rows for t in r[2:])
    assert [s[0] for s in summary] == ["encode", "decode_pixel", "latent"]
    assert all(s[2] == 1 and s[3] == 2 for s in summary)


def test_bench_pipelines_validation(rng):
    codec = build_codec(RdConfig(latent_channels=8, hyper_channels=4, width=8), 0)
    pixel, latent = small_model("resnet_anchor"), small_model("fa_cresnet")
    img = [rng.random((3, 32, 32)).astype(np.float32)]
    with pytest.raises(ValueError, match="repetitions"):
        bench_pipelines(codec, pixel, latent, img, repetitions=0)
    with pytest.raises(ValueError, match="no images"):
        bench_pipelines(codec, pixel, latent, [])
    with pytest.raises(ValueError, match="latent-domain"):
        bench_pipelines(codec, latent, pixel, img)


def test_bench_kernels_rows():
    rows = bench_kernels(repetitions=1)
    backends = {r[1] for r in rows}
    assert "numpy" in backends
    assert all(len(r) == 3 and r[2] > 0 for r in rows)
    assert len({r[0] for r in rows}) == 3


# -- sweep ---------------------------------------------------------------------------


def test_check_coverage_touches_every_axis():
    rows = check_coverage()
    assert {r[0] for r in rows} == set(SWEEP_AXES)
    for axis, key, n in rows:
        assert key == SWEEP_AXES[axis][0]
        assert n == len(SWEEP_AXES[axis][1])


def test_parse_axes_and_cells():
    axes = parse_axes("cau_mode=scale,affine; pooling=max")
    assert axes == {"cau_mode": ["scale", "affine"], "pooling": ["max"]}
    cells = sweep_cells(axes)
    assert cells == [{"cau_mode": "scale", "pooling": "max"},
                     {"cau_mode": "affine", "pooling": "max"}]


@pytest.mark.parametrize("text,msg", [
    ("cau_mode", "not of the form"),
    ("dropout=0.5", "unknown sweep axis"),
    ("cau_mode=", "no values"),
    ("cau_mode=fancy", "outside axis"),
    ("cau_mode=scale;cau_mode=bias", "listed twice"),
    ("", "no sweep axes"),
])
def test_parse_axes_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_axes(text)


def test_run_sweep_smoke(tmp_path, rng):
    samples = []
    for label in range(4):
        for _ in range(3):
            y = rng.normal(size=(6, 4, 4)).astype(np.float32)
            samples.append(LatentSample(y, np.exp(y), label, 0.5))
    base = {
        "model.trunk_channels": "8,12,16",
        "model.stem_channels": "8",
        "model.y_head_channels": "8",
        "model.sigma_head_channels": "4",
        "model.latent_channels": "6",
        "cau.r": "2",
        "feu.n": "1",
        "train.total_epochs": "1",
        "train.phase1_epochs": "0",
        "train.batch_size": "4",
        "train.augment": "false",
    }
    rows = run_sweep(base, parse_axes("variant=cresnet,fa_cresnet"),
                     samples[:8], samples[8:], str(tmp_path), seed=0)
    assert len(rows) == 2
    assert [r[1] for r in rows] == ["cresnet", "fa_cresnet"]
    assert all(0.0 <= r[2] <= 1.0 for r in rows)
    cols, trows = read_tsv(str(tmp_path / "sweep.tsv"))
    assert cols == ["cell", "variant", "val_top1", "seconds"]
    assert len(trows) == 2
    assert (tmp_path / "cell000" / "metrics.tsv").exists()
