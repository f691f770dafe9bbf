"""Numba-jitted direct-loop convolution kernels.

Parallel loops are arranged so each thread owns a disjoint output slice
(batch x channel for forward/input-grad, output channel for weight-grad),
which keeps accumulation order fixed and results bit-deterministic for a
given build regardless of thread count.
"""

from __future__ import annotations

import os

# must precede the numba import; workqueue sidesteps TBB-version warnings
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def conv2d_fwd(x, w, stride, pad):
    b, ci, h, wd = x.shape
    co, k = w.shape[0], w.shape[2]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((b, co, ho, wo), dtype=x.dtype)
    for bo in prange(b * co):
        bi = bo // co
        o = bo % co
        for i in range(ho):
            i0 = i * stride - pad
            for j in range(wo):
                j0 = j * stride - pad
                acc = x.dtype.type(0.0)
                for c in range(ci):
                    for ki in range(k):
                        ii = i0 + ki
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(k):
                            jj = j0 + kj
                            if jj < 0 or jj >= wd:
                                continue
                            acc += x[bi, c, ii, jj] * w[o, c, ki, kj]
                y[bi, o, i, j] = acc
    return y


@njit(parallel=True, cache=True)
def conv2d_bwd_weight(dy, x, k, stride, pad):
    b, ci, h, wd = x.shape
    co, ho, wo = dy.shape[1], dy.shape[2], dy.shape[3]
    dw = np.zeros((co, ci, k, k), dtype=x.dtype)
    for o in prange(co):
        for bi in range(b):
            for i in range(ho):
                i0 = i * stride - pad
                for j in range(wo):
                    j0 = j * stride - pad
                    g = dy[bi, o, i, j]
                    if g == 0.0:
                        continue
                    for c in range(ci):
                        for ki in range(k):
                            ii = i0 + ki
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(k):
                                jj = j0 + kj
                                if jj < 0 or jj >= wd:
                                    continue
                                dw[o, c, ki, kj] += g * x[bi, c, ii, jj]
    return dw


@njit(parallel=True, cache=True)
def conv2d_bwd_input(dy, w, stride, pad, h, wd):
    b, co, ho, wo = dy.shape
    ci, k = w.shape[1], w.shape[2]
    dx = np.zeros((b, ci, h, wd), dtype=dy.dtype)
    for bc in prange(b * ci):
        bi = bc // ci
        c = bc % ci
        for o in range(co):
            for i in range(ho):
                i0 = i * stride - pad
                for j in range(wo):
                    j0 = j * stride - pad
                    g = dy[bi, o, i, j]
                    if g == 0.0:
                        continue
                    for ki in range(k):
                        ii = i0 + ki
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(k):
                            jj = j0 + kj
                            if jj < 0 or jj >= wd:
                                continue
                            dx[bi, c, ii, jj] += g * w[o, c, ki, kj]
    return dx
