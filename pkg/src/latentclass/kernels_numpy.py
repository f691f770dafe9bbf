"""Pure-numpy convolution kernels (im2col / window-view based).

Fallback path for machines without numba; also the reference the numba
kernels are benchmarked and tested against.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate x (B,Ci,H,W) with w (Co,Ci,k,k) -> (B,Co,Ho,Wo)."""
    k = w.shape[2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, Ci, Ho, Wo, k, k)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, Co)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_bwd_weight(dy: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Gradient of conv2d_fwd w.r.t. the weight."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B,Ci,Ho,Wo,k,k) x (B,Co,Ho,Wo) -> (Co,Ci,k,k)
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(dw)


def conv2d_bwd_input(
    dy: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, w_in: int
) -> np.ndarray:
    """Gradient of conv2d_fwd w.r.t. the input (shape (B,Ci,h,w_in)).

    Computed as a full correlation of the stride-dilated output gradient with
    the spatially flipped, channel-transposed weight.
    """
    b, co, ho, wo = dy.shape
    k = w.shape[2]
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    top = k - 1 - pad
    if top < 0:
        raise ValueError(f"padding {pad} exceeds kernel-1 for k={k}")
    # Asymmetric tail padding: dx row i needs dilated rows (i+pad-k+1)..(i+pad),
    # so the bottom/right extent is h+pad-hd (larger than `top` whenever the
    # forward pass dropped trailing pixels, zero-filled where windows never hit).
    bot, right = h + pad - hd, w_in + pad - wd
    dil = np.zeros((b, co, top + hd + bot, top + wd + right), dtype=dy.dtype)
    dil[:, :, top : top + hd : stride, top : top + wd : stride] = dy
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (Ci,Co,k,k)
    return conv2d_fwd(dil, wf, 1, 0)
