"""Binary and text file formats: LTEN tensors, LCKP checkpoints, PPM images, TSV tables.

All binary multi-byte fields are little-endian. Tensor payloads are float32,
C-order. Loaders fail with messages naming the file, the byte offset and
the expected-vs-found values so a corrupt artifact is diagnosable.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

LTEN_MAGIC = b"LTEN"
LCKP_MAGIC = b"LCKP"


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


def _need(buf: bytes, off: int, n: int, path: str, what: str) -> int:
    if off + n > len(buf):
        raise FormatError(
            f"{path}: truncated at offset {off}: need {n} bytes for {what}, "
            f"have {len(buf) - off}"
        )
    return off + n


# -- LTEN: single tensor ------------------------------------------------------


def pack_tensor(arr: np.ndarray) -> bytes:
    # asarray first: ascontiguousarray would promote rank-0 inputs to rank 1
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    head = LTEN_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def unpack_tensor(buf: bytes, off: int, path: str) -> Tuple[np.ndarray, int]:
    end = _need(buf, off, 8, path, "tensor header")
    magic = buf[off : off + 4]
    if magic != LTEN_MAGIC:
        raise FormatError(
            f"{path}: bad tensor magic at offset {off}: expected {LTEN_MAGIC!r}, "
            f"found {magic!r}"
        )
    (rank,) = struct.unpack_from("<I", buf, off + 4)
    if rank > 8:
        raise FormatError(f"{path}: implausible tensor rank {rank} at offset {off + 4}")
    off = end
    end = _need(buf, off, 4 * rank, path, "tensor extents")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off = end
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = _need(buf, off, 4 * count, path, f"tensor data ({count} float32)")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return arr.astype(np.float32), end


def write_lten(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(pack_tensor(arr))


def read_lten(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, off = unpack_tensor(buf, 0, path)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after tensor data")
    return arr


# -- LCKP: named-tensor checkpoint --------------------------------------------


@dataclass
class Checkpoint:
    config_digest: str
    phase: str
    epoch: int
    tensors: Dict[str, np.ndarray]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _unpack_str(buf: bytes, off: int, path: str, what: str) -> Tuple[str, int]:
    end = _need(buf, off, 4, path, f"{what} length")
    (n,) = struct.unpack_from("<I", buf, off)
    off = end
    end = _need(buf, off, n, path, what)
    return buf[off:end].decode("utf-8"), end


def write_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Atomically write a checkpoint (tmp file + rename)."""
    parts = [LCKP_MAGIC, _pack_str(ckpt.config_digest), _pack_str(ckpt.phase)]
    parts.append(struct.pack("<I", ckpt.epoch))
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        parts.append(_pack_str(name))
        parts.append(pack_tensor(arr))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    off = _need(buf, 0, 4, path, "checkpoint magic")
    if buf[:4] != LCKP_MAGIC:
        raise FormatError(
            f"{path}: bad checkpoint magic: expected {LCKP_MAGIC!r}, found {buf[:4]!r}"
        )
    digest, off = _unpack_str(buf, off, path, "config digest")
    phase, off = _unpack_str(buf, off, path, "phase name")
    end = _need(buf, off, 8, path, "epoch/tensor-count")
    epoch, count = struct.unpack_from("<II", buf, off)
    off = end
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name, off = _unpack_str(buf, off, path, "tensor name")
        arr, off = unpack_tensor(buf, off, path)
        tensors[name] = arr
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return Checkpoint(digest, phase, int(epoch), tensors)


# -- PPM (P6, maxval 255) -------------------------------------------------------


def write_ppm(path: str, img: np.ndarray) -> None:
    """Write a (3,H,W) image; float arrays are taken as [0,1] and quantized."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3,H,W), got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def _ppm_token(buf: bytes, off: int, path: str) -> Tuple[bytes, int]:
    n = len(buf)
    while off < n:
        c = buf[off : off + 1]
        if c == b"#":
            while off < n and buf[off : off + 1] not in (b"\n", b"\r"):
                off += 1
        elif c.isspace():
            off += 1
        else:
            break
    if off >= n:
        raise FormatError(f"{path}: truncated PPM header at offset {off}")
    start = off
    while off < n and not buf[off : off + 1].isspace():
        off += 1
    return buf[start:off], off


def read_ppm(path: str) -> np.ndarray:
    """Read a P6 PPM into float32 (3,H,W) scaled to [0,1]."""
    with open(path, "rb") as f:
        buf = f.read()
    tok, off = _ppm_token(buf, 0, path)
    if tok != b"P6":
        raise FormatError(f"{path}: expected PPM magic b'P6', found {tok!r}")
    dims = []
    for what in ("width", "height", "maxval"):
        tok, off = _ppm_token(buf, off, path)
        try:
            dims.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: non-numeric PPM {what}: {tok!r}") from None
    w, h, maxval = dims
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}, expected 255")
    off += 1  # single whitespace byte after maxval
    end = _need(buf, off, 3 * h * w, path, f"{h}x{w} pixel data")
    pix = np.frombuffer(buf, dtype=np.uint8, count=3 * h * w, offset=off)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after pixel data")
    img = pix.reshape(h, w, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0).copy()


# -- TSV tables -------------------------------------------------------------------


def format_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.8g}"
    return str(v)


def write_tsv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(format_cell(v) for v in row) + "\n")


def read_tsv(path: str) -> Tuple[List[str], List[Dict[str, str]]]:
    """Read a TSV with a header row; returns (header, rows-as-dicts)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty TSV, expected a header row")
    header = lines[0].split("\t")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        cells = ln.split("\t")
        if len(cells) != len(header):
            raise FormatError(
                f"{path}:{i}: row has {len(cells)} cells, header has {len(header)}"
            )
        rows.append(dict(zip(header, cells)))
    return header, rows
