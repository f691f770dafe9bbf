"""Codec tests: quantizer, rate models, transforms, RD loss, training loop."""

import numpy as np
import pytest
from scipy import stats

from latentclass import tensor as T
from latentclass.codec import (DOWN_FACTOR, LAMBDA_BY_QUALITY, MIN_LIKELIHOOD,
                               CodecTrainConfig, DivergenceError, RdConfig,
                               build_codec, codec_train_config_from_flat,
                               compress_sample, decode, encode, export_dataset,
                               factorized_rate_bits, gaussian_rate_bits,
                               load_codec, load_latent_dataset, mse, ms_ssim,
                               ms_ssim_scales, pad_to_multiple, psnr, quantize,
                               rate_bits, rd_config_from_flat, rd_loss, ssim,
                               train_codec)
from latentclass.tensor import Tensor

TINY_RD = dict(latent_channels=8, hyper_channels=4, width=8)


def tiny_codec(seed=0, **kw):
    cfg = RdConfig(**{**TINY_RD, **kw})
    return build_codec(cfg, seed), cfg


# -- configs ------------------------------------------------------------------


def test_rd_config_lambda_defaults_by_quality():
    for q, lam in LAMBDA_BY_QUALITY.items():
        assert RdConfig(quality_index=q).lambda_d == lam
    with pytest.raises(ValueError, match="no default lambda"):
        RdConfig(quality_index=9)
    assert RdConfig(quality_index=9, lambda_d=12.0).lambda_d == 12.0
    with pytest.raises(ValueError, match="lambda_d"):
        RdConfig(lambda_d=-1.0)


def test_rd_config_from_flat_override():
    rd = rd_config_from_flat({"rd.quality": "2", "rd.lambda": "77", "rd.width": "8"})
    assert rd.quality_index == 2 and rd.lambda_d == 77.0 and rd.width == 8
    assert rd_config_from_flat({"rd.quality": "2"}).lambda_d == LAMBDA_BY_QUALITY[2]


def test_codec_train_config_from_flat():
    rd = RdConfig()
    tc = codec_train_config_from_flat({"codec.epochs": "3", "codec.lr": "0.01"}, rd)
    assert tc.epochs == 3 and tc.lr == 0.01 and tc.rd is rd


# -- quantizer ------------------------------------------------------------------


def test_quantize_eval_rounds_half_away_from_zero():
    v = np.array([0.5, -0.5, 1.5, -1.5, 2.4, -2.4, 0.49, 3.0], dtype=np.float32)
    got = quantize(Tensor(v), "eval").data
    np.testing.assert_array_equal(got, [1, -1, 2, -2, 2, -2, 0, 3])


def test_quantize_train_adds_bounded_noise(rng):
    v = rng.normal(size=(4, 3, 3)).astype(np.float32)
    out = quantize(Tensor(v), "train", rng).data
    assert np.all(np.abs(out - v) <= 0.5)
    with pytest.raises(ValueError, match="rng"):
        quantize(Tensor(v), "train")
    with pytest.raises(ValueError, match="train|eval"):
        quantize(Tensor(v), "round")


# -- rate models ----------------------------------------------------------------


def gaussian_bits_oracle(symbols, sigma):
    p = stats.norm.cdf((symbols + 0.5) / sigma) - stats.norm.cdf((symbols - 0.5) / sigma)
    return float(-np.log2(np.maximum(p, MIN_LIKELIHOOD)).sum())


def test_gaussian_rate_matches_cdf_oracle(rng):
    for _ in range(10):
        s = np.rint(rng.normal(0, 3, size=(2, 4, 4))).astype(np.float64)
        sigma = np.exp(rng.uniform(-3, 3, size=s.shape)).astype(np.float64)
        got = float(gaussian_rate_bits(Tensor(s, dtype=np.float64),
                                       Tensor(sigma, dtype=np.float64)).data)
        assert got == pytest.approx(gaussian_bits_oracle(s, sigma), abs=1e-6)


def test_gaussian_rate_is_nonnegative_and_validates(rng):
    s = np.rint(rng.normal(0, 5, size=(3, 5))).astype(np.float32)
    sigma = np.full_like(s, 0.3)
    assert float(gaussian_rate_bits(Tensor(s), Tensor(sigma)).data) >= 0.0
    with pytest.raises(ValueError, match="positive sigma"):
        gaussian_rate_bits(Tensor(s), Tensor(np.zeros_like(s)))
    with pytest.raises(ValueError, match="shape"):
        gaussian_rate_bits(Tensor(s), Tensor(sigma[:2]))


def test_gaussian_rate_likelihood_floor():
    # symbol far in the tail: mass underflows and is floored, bits = 24 each
    s = Tensor(np.full((4,), 1000.0, dtype=np.float64))
    sigma = Tensor(np.full((4,), 0.1, dtype=np.float64))
    got = float(gaussian_rate_bits(s, sigma).data)
    assert got == pytest.approx(4 * 24.0, rel=1e-12)


def test_factorized_rate_matches_logistic_oracle(rng):
    params, cfg = tiny_codec()
    log_scale = rng.uniform(-1, 1, size=cfg.hyper_channels).astype(np.float64)
    params["prior.log_scale"].data[:] = log_scale.astype(np.float32)
    s = np.rint(rng.normal(0, 2, size=(cfg.hyper_channels, 3, 3))).astype(np.float64)
    got = float(factorized_rate_bits(Tensor(s), params).data)
    scale = np.exp(log_scale.astype(np.float32)).astype(np.float64)[:, None, None]
    p = stats.logistic.cdf((s + 0.5) / scale) - stats.logistic.cdf((s - 0.5) / scale)
    want = float(-np.log2(np.maximum(p, MIN_LIKELIHOOD)).sum())
    assert got == pytest.approx(want, abs=1e-4)


def test_factorized_rate_channel_check(rng):
    params, cfg = tiny_codec()
    with pytest.raises(ValueError, match="channels"):
        factorized_rate_bits(Tensor(np.zeros((cfg.hyper_channels + 1, 2, 2))), params)


def test_rate_bits_dispatch(rng):
    params, cfg = tiny_codec()
    s = Tensor(np.zeros((cfg.hyper_channels, 2, 2), dtype=np.float32))
    sig = Tensor(np.ones_like(s.data))
    assert float(rate_bits(s, "gaussian", sigma=sig).data) > 0
    assert float(rate_bits(s, "factorized", params=params).data) > 0
    with pytest.raises(ValueError, match="sigma"):
        rate_bits(s, "gaussian")
    with pytest.raises(ValueError, match="params"):
        rate_bits(s, "factorized")
    with pytest.raises(ValueError, match="prior"):
        rate_bits(s, "laplacian")


# -- padding / encode / decode ------------------------------------------------------


def test_pad_to_multiple_reflects():
    img = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    out, (ph, pw) = pad_to_multiple(img, 4)
    assert out.shape == (1, 4, 4) and (ph, pw) == (1, 0)
    np.testing.assert_array_equal(out[0, 3], img[0, 1])  # reflect row
    same, pads = pad_to_multiple(img, 2)
    assert pads == (1, 0) and same.shape == (1, 4, 4)
    noop, pads = pad_to_multiple(np.zeros((3, 8, 8), dtype=np.float32), 4)
    assert pads == (0, 0) and noop.shape == (3, 8, 8)


def test_encode_shape_law_and_integility(rng):
    params, cfg = tiny_codec()
    for h, w in [(32, 32), (48, 32), (33, 47), (40, 56)]:
        img = rng.random((3, h, w)).astype(np.float32)
        res = encode(img, params)
        hp = -(-h // DOWN_FACTOR) * DOWN_FACTOR
        wp = -(-w // DOWN_FACTOR) * DOWN_FACTOR
        assert res.y_hat.shape == (cfg.latent_channels, hp // DOWN_FACTOR, wp // DOWN_FACTOR)
        assert res.sigma_hat.shape == res.y_hat.shape
        assert np.all(res.sigma_hat.data > 0)
        np.testing.assert_array_equal(res.y_hat.data, np.rint(res.y_hat.data))


def test_encode_pad_disabled_rejects_nonmultiple(rng):
    params, _ = tiny_codec()
    with pytest.raises(ValueError, match="divisible"):
        encode(rng.random((3, 33, 32)).astype(np.float32), params, pad=False)


def test_decode_clamps_and_checks_channels(rng):
    params, cfg = tiny_codec()
    y = rng.normal(0, 5, size=(cfg.latent_channels, 2, 2)).astype(np.float32)
    x_hat = decode(y, params)
    assert x_hat.shape == (3, 32, 32)
    assert np.all(x_hat.data >= 0) and np.all(x_hat.data <= 1)
    with pytest.raises(ValueError):
        decode(np.zeros((cfg.latent_channels + 1, 2, 2), dtype=np.float32), params)


# -- distortion metrics ---------------------------------------------------------


def test_mse_and_psnr(rng):
    x = rng.random((3, 8, 8)).astype(np.float32)
    assert float(mse(Tensor(x), Tensor(x)).data) == 0.0
    assert psnr(x, x) == float("inf")
    y = np.clip(x + 0.1, 0, 1)
    m = float(np.mean((x - y) ** 2))
    assert psnr(x, y) == pytest.approx(-10 * np.log10(m), rel=1e-5)


def test_ssim_identity_and_range(rng):
    x = rng.random((3, 16, 16)).astype(np.float32)
    assert float(ssim(x, x).data) == 1.0
    noisy = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1).astype(np.float32)
    assert float(ssim(x, noisy).data) < 1.0
    with pytest.raises(ValueError, match="shape"):
        ssim(x, x[:, :8])
    with pytest.raises(ValueError, match="extent"):
        ssim(x[:, :8, :8], x[:, :8, :8])


def test_ms_ssim_scale_count():
    assert ms_ssim_scales(16, 16) == 1
    assert ms_ssim_scales(32, 32) == 2
    assert ms_ssim_scales(64, 64) == 3
    assert ms_ssim_scales(512, 512) == 5


def test_ms_ssim_identity_exact_and_degradation_orders(rng):
    x = rng.random((3, 64, 64)).astype(np.float32)
    assert float(ms_ssim(x, x).data) == 1.0
    slight = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1).astype(np.float32)
    heavy = np.clip(x + rng.normal(0, 0.3, x.shape), 0, 1).astype(np.float32)
    a, b = float(ms_ssim(x, slight).data), float(ms_ssim(x, heavy).data)
    assert 0.0 < b < a < 1.0


# -- RD loss ----------------------------------------------------------------------


def rd_terms(rng, cfg):
    params = build_codec(cfg, 0)
    x = Tensor(rng.random((3, 32, 32)).astype(np.float32))
    res = encode(x.data, params)
    x_hat = decode(res.y_hat, params)
    return params, x, x_hat, res


def test_rd_loss_lambda_scales_distortion_exactly(rng):
    cfg1 = RdConfig(quality_index=9, lambda_d=10.0, **TINY_RD)
    cfg2 = RdConfig(quality_index=9, lambda_d=20.0, **TINY_RD)
    params, x, x_hat, res = rd_terms(rng, cfg1)
    args = (x, x_hat, res.y_hat, res.z_hat, res.sigma_hat)
    l1 = float(rd_loss(*args, cfg1, params).data)
    l2 = float(rd_loss(*args, cfg2, params).data)
    d = float(mse(x, x_hat).data)
    assert l2 - l1 == pytest.approx(10.0 * d, rel=1e-5)


def test_rd_loss_ms_ssim_distortion_branch(rng):
    cfg = RdConfig(quality_index=9, lambda_d=5.0, distortion="ms_ssim", **TINY_RD)
    params, x, x_hat, res = rd_terms(rng, cfg)
    loss = float(rd_loss(x, x_hat, res.y_hat, res.z_hat, res.sigma_hat, cfg, params).data)
    q = float(ms_ssim(x, x_hat).data)
    bits = float(T.add(gaussian_rate_bits(res.y_hat, res.sigma_hat),
                       factorized_rate_bits(res.z_hat, params)).data)
    assert loss == pytest.approx(5.0 * (1.0 - q) + bits / (32 * 32), rel=1e-5)


# -- dataset export -----------------------------------------------------------------


def test_compress_export_load_round_trip(tmp_path, rng):
    params, cfg = tiny_codec()
    images = [rng.random((3, 32, 32)).astype(np.float32) for _ in range(4)]
    labels = [0, 1, 2, 1]
    s0 = compress_sample(images[0], 0, params)
    assert s0.bpp >= 0.0 and s0.y_hat.shape[0] == cfg.latent_channels

    out = str(tmp_path / "latents")
    summary = export_dataset(images, labels, params, out)
    assert summary["count"] == 4
    assert summary["mean_psnr"] > 0 and 0 <= summary["mean_ms_ssim"] <= 1

    samples, back = load_latent_dataset(out)
    assert [s.label for s in samples] == labels
    np.testing.assert_array_equal(samples[0].y_hat, s0.y_hat)
    np.testing.assert_array_equal(samples[0].sigma_hat, s0.sigma_hat)
    assert back["mean_bpp"] == pytest.approx(summary["mean_bpp"], rel=1e-6)
    assert samples[0].bpp == pytest.approx(s0.bpp, rel=1e-6)


def test_export_length_mismatch(tmp_path, rng):
    params, _ = tiny_codec()
    with pytest.raises(ValueError, match="labels"):
        export_dataset([rng.random((3, 32, 32))], [0, 1], params, str(tmp_path / "x"))


# -- training -----------------------------------------------------------------------


def small_train_setup(rng, n=8, epochs=2):
    images = rng.random((n, 3, 32, 32)).astype(np.float32)
    rd = RdConfig(quality_index=1, **TINY_RD)
    tc = CodecTrainConfig(epochs=epochs, batch_size=4, lr=1e-3, eval_subset=2, rd=rd)
    return images, tc


def test_train_codec_writes_rows_and_checkpoint(tmp_path, rng):
    images, tc = small_train_setup(rng)
    ckpt, rows = train_codec(images, tc, seed=3, out_dir=str(tmp_path / "c"))
    assert len(rows) == tc.epochs
    assert all(len(r) == 5 for r in rows)
    params = load_codec(ckpt, tc.rd)
    assert "g_a.conv0.weight" in params.names()


def test_train_codec_resume_is_bit_exact(tmp_path, rng):
    images, tc = small_train_setup(rng, epochs=2)
    full_ckpt, full_rows = train_codec(images, tc, seed=3, out_dir=str(tmp_path / "full"))

    tc1 = CodecTrainConfig(epochs=1, batch_size=4, lr=1e-3, eval_subset=2, rd=tc.rd)
    part_ckpt, _ = train_codec(images, tc1, seed=3, out_dir=str(tmp_path / "part"))
    res_ckpt, res_rows = train_codec(images, tc, seed=3, out_dir=str(tmp_path / "res"),
                                     resume=part_ckpt)
    assert res_rows[0][0] == 1  # resumed run starts at the next epoch
    assert res_rows[0] == full_rows[1]
    a = load_codec(full_ckpt, tc.rd)
    b = load_codec(res_ckpt, tc.rd)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data, err_msg=name)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_train_codec_divergence_aborts(tmp_path, rng):
    images, tc = small_train_setup(rng, epochs=1)
    tc.lr = 1e12  # Adam steps of ~1e12 overflow float32 activations immediately
    with pytest.raises(DivergenceError, match="non-finite"):
        train_codec(images, tc, seed=3, out_dir=str(tmp_path / "d"))


def test_train_codec_rejects_empty(tmp_path):
    images = np.zeros((0, 3, 32, 32), dtype=np.float32)
    with pytest.raises(ValueError, match="empty"):
        train_codec(images, CodecTrainConfig(rd=RdConfig(**TINY_RD)), 0, str(tmp_path / "e"))
