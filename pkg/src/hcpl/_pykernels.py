"""Numpy implementations of the hot loops, used when the compiled module is absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _columns(x, k, stride):
    # (N, C, Ho, Wo, k, k) view of every receptive field
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    O, C, k, _ = w.shape
    cols = _columns(x, k, stride)
    N, _, Ho, Wo = cols.shape[:4]
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    out = flat @ w.reshape(O, -1).T
    return np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, gout, stride):
    O, C, k, _ = w.shape
    N, _, Ho, Wo = gout.shape
    cols = _columns(x, k, stride)
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    g = gout.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
    gw = (g.T @ flat).reshape(O, C, k, k)
    gcols = (g @ w.reshape(O, -1)).reshape(N, Ho, Wo, C, k, k)
    gx = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            gx[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += (
                gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
    return gx, gw


def geodesic_grow(seeds, fg):
    """Grow labelled seeds through ``fg`` one BFS layer at a time.

    A pixel first reached in layer ``d`` takes the smallest label among its
    already-labelled 4-neighbours, so ties go to the lowest seed label.
    """
    lab = np.array(seeds, dtype=np.int32, copy=True)
    fg = fg.astype(bool)
    big = np.iinfo(np.int32).max
    H, W = lab.shape
    while True:
        src = np.where(lab > 0, lab, big)
        cand = np.full((H, W), big, dtype=np.int32)
        np.minimum(cand[1:, :], src[:-1, :], out=cand[1:, :])
        np.minimum(cand[:-1, :], src[1:, :], out=cand[:-1, :])
        np.minimum(cand[:, 1:], src[:, :-1], out=cand[:, 1:])
        np.minimum(cand[:, :-1], src[:, 1:], out=cand[:, :-1])
        new = fg & (lab == 0) & (cand < big)
        if not new.any():
            return lab
        lab[new] = cand[new]
