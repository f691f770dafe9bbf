"""Synthetic four-class texture corpus: gratings, checkerboards, blue noise, blobs.

Classes differ primarily in spatial structure: sinusoidal gratings carry a
single orientation, checkerboards a square-wave lattice, blue noise pure high
frequencies, blobs pure low frequencies. Each class also has a characteristic
color tint direction with per-image tint noise of comparable magnitude, so
mean color is a useful but imperfect cue: enough for a linear pixel baseline,
while the texture structure remains the dominant signal.
Each image is derived from rng([seed, label, index]), making the corpus
byte-identical for a given seed regardless of generation order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .config import get_float, get_int
from .io import write_ppm, write_tsv

CLASS_NAMES = ("gratings", "checkerboards", "blue_noise", "blobs")
LABEL_COLUMNS = ("path", "label", "class_name")

# zero-sum RGB tint directions, L-inf normalized; a square in the zero-sum
# plane so pairwise center distances are balanced
TINT_DIRECTIONS = (
    (1.0, -1.0, 0.0),
    (0.5, 0.5, -1.0),
    (-1.0, 1.0, 0.0),
    (-0.5, -0.5, 1.0),
)


@dataclass
class TextureSpec:
    per_class: int = 100
    size: int = 64
    seed: int = 0
    freq_lo: float = 2.0   # grating cycles per image
    freq_hi: float = 5.0
    cell_lo: int = 10      # checkerboard cell side, pixels
    cell_hi: int = 20
    amp_lo: float = 0.25   # contrast amplitude around mid-gray
    amp_hi: float = 0.42
    tint_sep: float = 0.05   # magnitude of the class tint direction
    tint_noise: float = 0.04  # per-image uniform tint noise, near tint_sep

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {self.per_class}")
        if self.size % 16 != 0:
            raise ValueError(f"size must be divisible by 16, got {self.size}")
        if not 0 < self.freq_lo < self.freq_hi:
            raise ValueError("need 0 < freq_lo < freq_hi")
        if not 0 < self.cell_lo < self.cell_hi:
            raise ValueError("need 0 < cell_lo < cell_hi")
        if not 0 < self.amp_lo < self.amp_hi <= 0.45:
            raise ValueError("need 0 < amp_lo < amp_hi <= 0.45")

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)


def texture_spec_from_flat(cfg: Dict[str, str], seed: int = 0) -> TextureSpec:
    d = TextureSpec()
    return TextureSpec(
        per_class=get_int(cfg, "data.per_class", d.per_class, lo=1),
        size=get_int(cfg, "data.size", d.size, lo=16),
        seed=seed,
        freq_lo=get_float(cfg, "data.freq_lo", d.freq_lo),
        freq_hi=get_float(cfg, "data.freq_hi", d.freq_hi),
        cell_lo=get_int(cfg, "data.cell_lo", d.cell_lo, lo=2),
        cell_hi=get_int(cfg, "data.cell_hi", d.cell_hi, lo=3),
        amp_lo=get_float(cfg, "data.amp_lo", d.amp_lo),
        amp_hi=get_float(cfg, "data.amp_hi", d.amp_hi),
        tint_sep=get_float(cfg, "data.tint_sep", d.tint_sep),
        tint_noise=get_float(cfg, "data.tint_noise", d.tint_noise),
    )


def _coords(size: int) -> Tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _normalize(field: np.ndarray, amp: float) -> np.ndarray:
    """Map a zero-centered field to mid-gray with peak amplitude amp."""
    peak = float(np.max(np.abs(field)))
    if peak == 0.0:
        return np.full_like(field, 0.5)
    return 0.5 + amp * field / peak

def _grating(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _coords(spec.size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(spec.freq_lo, spec.freq_hi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(spec.amp_lo, spec.amp_hi)
    u = (xx * np.cos(theta) + yy * np.sin(theta)) * (2.0 * np.pi * freq / spec.size)
    return 0.5 + amp * np.sin(u + phase)


def _checkerboard(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _coords(spec.size)
    cell = float(rng.integers(spec.cell_lo, spec.cell_hi + 1))
    theta = rng.uniform(0.0, np.pi / 2.0)
    ox, oy = rng.uniform(0.0, cell, size=2)
    amp = rng.uniform(spec.amp_lo, spec.amp_hi)
    u = (xx * np.cos(theta) + yy * np.sin(theta) + ox) / cell
    v = (-xx * np.sin(theta) + yy * np.cos(theta) + oy) / cell
    parity = (np.floor(u).astype(np.int64) + np.floor(v).astype(np.int64)) % 2
    return 0.5 + amp * (2.0 * parity - 1.0)


def _blue_noise(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(0.0, 1.0, (spec.size, spec.size))
    sigma = rng.uniform(1.0, 2.0)
    high = white - ndimage.gaussian_filter(white, sigma, mode="wrap")
    amp = rng.uniform(spec.amp_lo, spec.amp_hi)
    return _normalize(high, amp)


def _blobs(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(0.0, 1.0, (spec.size, spec.size))
    sigma = rng.uniform(6.0, 12.0)
    low = ndimage.gaussian_filter(white, sigma, mode="wrap")
    amp = rng.uniform(spec.amp_lo, spec.amp_hi)
    return _normalize(low, amp)


_RENDERERS = (_grating, _checkerboard, _blue_noise, _blobs)


def render_texture(label: int, spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) float image in [0,1] for the given class label."""
    if not 0 <= label < len(CLASS_NAMES):
        raise ValueError(f"label must be in [0, {len(CLASS_NAMES)}), got {label}")
    gray = _RENDERERS[label](spec, rng)
    tint = spec.tint_sep * np.asarray(TINT_DIRECTIONS[label])
    tint = tint + rng.uniform(-spec.tint_noise, spec.tint_noise, size=3)
    img = gray[None, :, :] + tint[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(out_dir: str, spec: TextureSpec) -> List[Tuple[str, int]]:
    """Write per_class images per class as PPM plus labels.tsv; returns (path, label)."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for label, name in enumerate(CLASS_NAMES):
        for i in range(spec.per_class):
            rng = np.random.default_rng([spec.seed, label, i])
            img = render_texture(label, spec, rng)
            fname = f"{name}_{i:04d}.ppm"
            write_ppm(os.path.join(out_dir, fname), img)
            entries.append((fname, label, name))
    write_tsv(os.path.join(out_dir, "labels.tsv"), LABEL_COLUMNS, entries)
    return [(p, l) for p, l, _ in entries]


def load_labels(corpus_dir: str) -> List[Tuple[str, int]]:
    """Read labels.tsv back as (path, label) pairs."""
    from .io import read_tsv

    _, rows = read_tsv(os.path.join(corpus_dir, "labels.tsv"))
    return [(r["path"], int(r["label"])) for r in rows]
