"""Kernel backend selection and worker-thread policy.

Two implementations of the hot convolution kernels exist: numba-jitted
direct loops (kernels_numba) and a pure-numpy im2col path (kernels_numpy).
The active one is picked from the LATENTCLASS_BACKEND environment variable:

    auto   - numba when importable and more than one thread is allowed,
             numpy otherwise (default)
    numba  - force numba, error if unavailable
    numpy  - force the pure-numpy fallback

The auto rule reflects measurement: the numba kernels win by spreading rows
over threads, so on a single-thread budget the vectorized numpy path is
faster. `latentclass bench --kernels` reports both on the current machine.

LATENTCLASS_THREADS caps both numba's thread pool and the worker pools used
for data-parallel evaluation/export. LATENTCLASS_DEBUG=1 enables finiteness
checks after every tensor op.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

log = logging.getLogger("latentclass")

_VALID_BACKENDS = ("auto", "numba", "numpy")

# workqueue avoids noisy TBB-version warnings and is fine for our core counts
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba as _numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    _numba = None
    HAS_NUMBA = False


def max_threads() -> int:
    """Worker-parallelism cap from LATENTCLASS_THREADS (>= 1)."""
    raw = os.environ.get("LATENTCLASS_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = min(4, os.cpu_count() or 1)
    return n


if HAS_NUMBA:
    try:
        _numba.set_num_threads(min(max_threads(), _numba.config.NUMBA_NUM_THREADS))
    except ValueError:
        pass


def debug_checks_enabled() -> bool:
    return os.environ.get("LATENTCLASS_DEBUG", "") == "1"


def _initial_backend() -> str:
    requested = os.environ.get("LATENTCLASS_BACKEND", "auto").lower()
    if requested not in _VALID_BACKENDS:
        log.warning("unknown LATENTCLASS_BACKEND=%r, falling back to auto", requested)
        requested = "auto"
    if requested == "numba" and not HAS_NUMBA:
        raise RuntimeError("LATENTCLASS_BACKEND=numba but numba is not installed")
    if requested == "auto":
        return "numba" if HAS_NUMBA and max_threads() > 1 else "numpy"
    return requested


_backend = _initial_backend()


def get_backend() -> str:
    """Currently active kernel backend, 'numba' or 'numpy'."""
    return _backend


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (mainly for tests and benchmarks)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"backend must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _backend = name


def parallel_map(fn, items):
    """Map fn over items with at most max_threads() workers, order-preserving.

    Used only for read-only parallelism (eval, export); falls back to a plain
    loop for a single worker.
    """
    items = list(items)
    workers = min(max_threads(), len(items)) if items else 1
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
