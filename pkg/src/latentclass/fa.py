"""Feature Adaptation module: Channel-wise Attention Unit + Feature Enhancement Unit.

The CAU pools a feature map into per-channel vectors, pushes them through a
bottleneck of fully connected layers, and emits a per-channel affine pair
(w, b) applied as f~ = w*f + b; w passes through a sigmoid, b stays unbounded.
The FEU is a residual stack [1x1 block, n x 3x3 blocks, 1x1 block], each
block = conv -> batch norm -> relu. A position switch composes the two units
four ways; either unit can be disabled, leaving the other (or identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .params import ParamStore, add_bn, add_conv, add_linear
from .tensor import Tensor

POOLINGS = ("max", "avg", "max_and_avg", "att_shared", "att_independent")
MODES = ("scale", "bias", "affine")
BOTTLENECKS = ("one_layer", "two_layer")
POSITIONS = ("pre", "skip", "inner", "post")
ENABLED_UNITS = ("cau_only", "feu_only", "both", "none")


@dataclass
class CauConfig:
    r: int = 16
    pooling: str = "att_independent"
    mode: str = "affine"
    bottleneck: str = "two_layer"

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {self.r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"bottleneck must be one of {BOTTLENECKS}, got {self.bottleneck!r}")


@dataclass
class FeuConfig:
    n: int = 3
    width: Optional[int] = None  # None: match the feature channel count

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"FEU block count must be >= 1, got {self.n}")


@dataclass
class FaConfig:
    cau: CauConfig = field(default_factory=CauConfig)
    feu: FeuConfig = field(default_factory=FeuConfig)
    cau_position: str = "pre"
    enabled_units: str = "both"

    def __post_init__(self):
        if self.cau_position not in POSITIONS:
            raise ValueError(f"cau_position must be one of {POSITIONS}, got {self.cau_position!r}")
        if self.enabled_units not in ENABLED_UNITS:
            raise ValueError(
                f"enabled_units must be one of {ENABLED_UNITS}, got {self.enabled_units!r}"
            )

    @property
    def has_cau(self) -> bool:
        return self.enabled_units in ("cau_only", "both")

    @property
    def has_feu(self) -> bool:
        return self.enabled_units in ("feu_only", "both")


def bottleneck_width(channels: int, r: int) -> int:
    return max(1, channels // r)


SCALE_INIT_LOGIT = 4.0  # sigmoid(4) ~ 0.982: near-unit scale for a fresh CAU


# -- parameter construction -----------------------------------------------------


def build_fa_params(store: ParamStore, rng: np.random.Generator, prefix: str,
                    channels: int, cfg: FaConfig) -> None:
    """Register every tensor the configured FA variant needs under `prefix`."""
    c = channels
    if cfg.has_cau:
        cau = cfg.cau
        branches = {"scale": ("w",), "bias": ("b",), "affine": ("w", "b")}[cau.mode]
        if cau.pooling == "att_shared":
            add_conv(store, rng, f"{prefix}.cau.pool", c, 1, 1)
        elif cau.pooling == "att_independent":
            for m in branches:
                add_conv(store, rng, f"{prefix}.cau.pool_{m}", c, 1, 1)
        hidden = bottleneck_width(c, cau.r)
        for m in branches:
            if cau.bottleneck == "two_layer":
                add_linear(store, rng, f"{prefix}.cau.fc1_{m}", c, hidden)
                add_linear(store, rng, f"{prefix}.cau.fc2_{m}", hidden, c)
                last = f"{prefix}.cau.fc2_{m}"
            else:
                add_linear(store, rng, f"{prefix}.cau.fc_{m}", c, c)
                last = f"{prefix}.cau.fc_{m}"
            # Zero the branch's final map so a fresh unit starts near identity:
            # b is exactly 0 and w a constant sigmoid(SCALE_INIT_LOGIT), keeping
            # an adopted trunk's features intact until the unit learns.
            store[f"{last}.weight"].data[:] = 0.0
            store[f"{last}.bias"].data[:] = SCALE_INIT_LOGIT if m == "w" else 0.0
    if cfg.has_feu:
        width = cfg.feu.width or c
        add_conv(store, rng, f"{prefix}.feu.conv_in", c, width, 1)
        add_bn(store, f"{prefix}.feu.bn_in", width)
        for i in range(cfg.feu.n):
            add_conv(store, rng, f"{prefix}.feu.conv{i}", width, width, 3)
            add_bn(store, f"{prefix}.feu.bn{i}", width)
        add_conv(store, rng, f"{prefix}.feu.conv_out", width, c, 1)
        add_bn(store, f"{prefix}.feu.bn_out", c)
        # Zero the residual branch's last conv so the FEU starts as identity.
        store[f"{prefix}.feu.conv_out.weight"].data[:] = 0.0
        store[f"{prefix}.feu.conv_out.bias"].data[:] = 0.0


# -- pooling ----------------------------------------------------------------------


def attention_pool(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Softmax-weighted channel sums: k = softmax(conv1x1(f)) over all positions."""
    logits = T.conv2d(f, weight, bias, stride=1, padding=0)  # (...,1,H,W)
    h, w = logits.shape[-2], logits.shape[-1]
    if f.ndim == 3:
        k = T.reshape(T.softmax(T.reshape(logits, (h * w,)), axis=-1), (1, h, w))
    else:
        b = logits.shape[0]
        k = T.reshape(T.softmax(T.reshape(logits, (b, h * w)), axis=-1), (b, 1, h, w))
    weighted = T.mul(f, k)
    return T.tsum(T.tsum(weighted, axis=-1), axis=-1)  # (C,) or (B,C)


def _pooled_vector(f: Tensor, cfg: CauConfig, store: ParamStore, prefix: str,
                   branch: str) -> Tensor:
    if cfg.pooling == "max":
        return T.max_pool_global(f)
    if cfg.pooling == "avg":
        return T.avg_pool_global(f)
    if cfg.pooling == "max_and_avg":
        return T.mul(T.add(T.max_pool_global(f), T.avg_pool_global(f)), 0.5)
    if cfg.pooling == "att_shared":
        name = f"{prefix}.cau.pool"
    else:
        name = f"{prefix}.cau.pool_{branch}"
    return attention_pool(f, store[f"{name}.weight"], store[f"{name}.bias"])


# -- CAU ----------------------------------------------------------------------------


def _bottleneck_map(v: Tensor, cfg: CauConfig, store: ParamStore, prefix: str,
                    branch: str) -> Tensor:
    if cfg.bottleneck == "one_layer":
        return T.linear(v, store[f"{prefix}.cau.fc_{branch}.weight"],
                        store[f"{prefix}.cau.fc_{branch}.bias"])
    h = T.linear(v, store[f"{prefix}.cau.fc1_{branch}.weight"],
                 store[f"{prefix}.cau.fc1_{branch}.bias"])
    h = T.relu(T.layer_norm(h))
    return T.linear(h, store[f"{prefix}.cau.fc2_{branch}.weight"],
                    store[f"{prefix}.cau.fc2_{branch}.bias"])


def cau_transform(f: Tensor, cfg: CauConfig, store: ParamStore, prefix: str) -> Tuple[Tensor, Tensor]:
    """Per-channel (w, b): w sigmoid-squashed, b unbounded; disabled branch is constant."""
    c = f.shape[-3]
    lead = () if f.ndim == 3 else (f.shape[0],)
    if cfg.mode != "bias":
        w = T.sigmoid(_bottleneck_map(_pooled_vector(f, cfg, store, prefix, "w"),
                                      cfg, store, prefix, "w"))
    else:
        w = Tensor(np.ones(lead + (c,), dtype=f.dtype))
    if cfg.mode != "scale":
        b = _bottleneck_map(_pooled_vector(f, cfg, store, prefix, "b"),
                            cfg, store, prefix, "b")
    else:
        b = Tensor(np.zeros(lead + (c,), dtype=f.dtype))
    return w, b


def cau_apply(f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """f~(c,i,j) = w(c) * f(c,i,j) + b(c), batched or not."""
    if w.shape[-1] != f.shape[-3]:
        raise ValueError(f"channel mismatch: f has {f.shape[-3]}, w has {w.shape[-1]}")
    shape = w.shape + (1, 1)
    return T.add(T.mul(f, T.reshape(w, shape)), T.reshape(b, b.shape + (1, 1)))


def _cau(f: Tensor, cfg: FaConfig, store: ParamStore, prefix: str) -> Tensor:
    w, b = cau_transform(f, cfg.cau, store, prefix)
    return cau_apply(f, w, b)


# -- FEU ---------------------------------------------------------------------------


def _conv_bn_relu(f: Tensor, store: ParamStore, conv: str, bn: str, mode: str,
                  padding: int) -> Tensor:
    t = T.conv2d(f, store[f"{conv}.weight"], store[f"{conv}.bias"], stride=1, padding=padding)
    t = T.batch_norm(t, store[f"{bn}.scale"], store[f"{bn}.shift"],
                     store.bn_state(bn), mode)
    return T.relu(t)


def feu_conv_path(f: Tensor, cfg: FeuConfig, store: ParamStore, prefix: str,
                  mode: str) -> Tensor:
    t = _conv_bn_relu(f, store, f"{prefix}.feu.conv_in", f"{prefix}.feu.bn_in", mode, 0)
    for i in range(cfg.n):
        t = _conv_bn_relu(t, store, f"{prefix}.feu.conv{i}", f"{prefix}.feu.bn{i}", mode, 1)
    return _conv_bn_relu(t, store, f"{prefix}.feu.conv_out", f"{prefix}.feu.bn_out", mode, 0)


def feu_forward(f: Tensor, cfg: FeuConfig, store: ParamStore, prefix: str,
                mode: str) -> Tensor:
    return T.add(f, feu_conv_path(f, cfg, store, prefix, mode))


# -- composition ---------------------------------------------------------------------


def fa_forward(f: Tensor, cfg: FaConfig, store: ParamStore, prefix: str,
               mode: str) -> Tensor:
    """Shape-preserving feature adaptation; composition set by cau_position.

    pre:   FEU(CAU(f))
    skip:  CAU(f) + conv_path(f)      (CAU output replaces the skip branch)
    inner: f + CAU(conv_path(f))
    post:  CAU(f + conv_path(f))
    A disabled unit degrades the composition to the remaining unit alone;
    with both disabled this is the identity.
    """
    if not cfg.has_cau and not cfg.has_feu:
        return f
    if not cfg.has_feu:
        return _cau(f, cfg, store, prefix)
    if not cfg.has_cau:
        return feu_forward(f, cfg.feu, store, prefix, mode)
    pos = cfg.cau_position
    if pos == "pre":
        return feu_forward(_cau(f, cfg, store, prefix), cfg.feu, store, prefix, mode)
    if pos == "skip":
        return T.add(_cau(f, cfg, store, prefix), feu_conv_path(f, cfg.feu, store, prefix, mode))
    if pos == "inner":
        return T.add(f, _cau(feu_conv_path(f, cfg.feu, store, prefix, mode), cfg, store, prefix))
    return _cau(T.add(f, feu_conv_path(f, cfg.feu, store, prefix, mode)), cfg, store, prefix)
