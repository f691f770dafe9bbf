"""Dispatch layer over the numba and numpy convolution kernels."""

from __future__ import annotations

import numpy as np

from . import kernels_numpy
from .backend import HAS_NUMBA, get_backend

if HAS_NUMBA:
    from . import kernels_numba
else:  # pragma: no cover
    kernels_numba = None


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if get_backend() == "numba":
        return kernels_numba.conv2d_fwd(x, w, stride, pad)
    return kernels_numpy.conv2d_fwd(x, w, stride, pad)


def conv2d_bwd_weight(dy: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if get_backend() == "numba":
        return kernels_numba.conv2d_bwd_weight(dy, x, k, stride, pad)
    return kernels_numpy.conv2d_bwd_weight(dy, x, k, stride, pad)


def conv2d_bwd_input(
    dy: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, w_in: int
) -> np.ndarray:
    if get_backend() == "numba":
        return kernels_numba.conv2d_bwd_input(dy, w, stride, pad, h, w_in)
    return kernels_numpy.conv2d_bwd_input(dy, w, stride, pad, h, w_in)
