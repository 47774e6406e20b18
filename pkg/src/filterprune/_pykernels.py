"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Scoring reductions use ``np.cumsum`` (strictly sequential) rather than
``np.sum`` (pairwise) so scores are bit-identical to the compiled path.
Convolutions go through an im2col view and BLAS; they agree with the
compiled loops to rounding, not bitwise.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _seq_sum_rows(a):
    if a.shape[1] == 0:
        return np.zeros(a.shape[0])
    return np.cumsum(a, axis=1)[:, -1]


def l1_scores(filters):
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    return _seq_sum_rows(np.abs(filters))


def pairwise_distances(filters):
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    n = filters.shape[0]
    dist = np.zeros((n, n))
    for a in range(n - 1):
        diff = filters[a + 1:] - filters[a]
        dist[a, a + 1:] = np.sqrt(_seq_sum_rows(diff * diff))
    iu = np.triu_indices(n, 1)
    dist[(iu[1], iu[0])] = dist[iu]
    return dist


def fpgm_scores(filters):
    return _seq_sum_rows(pairwise_distances(filters))


def _windows(x, k):
    # (B, C, Ho, Wo, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d_forward(x, w, bias):
    k = w.shape[2]
    if x.shape[1] != w.shape[1] or w.shape[3] != k or bias.shape[0] != w.shape[0]:
        raise ValueError("conv2d_forward: incompatible shapes")
    if x.shape[2] < k or x.shape[3] < k:
        raise ValueError("conv2d_forward: incompatible shapes")
    cols = _windows(x, k)
    y = np.einsum("bchwpq,ocpq->bohw", cols, w, optimize=True)
    y += bias[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, dy, need_dx=True):
    k = w.shape[2]
    B, C, H, W = x.shape
    if dy.shape != (B, w.shape[0], H - k + 1, W - k + 1):
        raise ValueError("conv2d_backward: incompatible shapes")
    cols = _windows(x, k)
    dw = np.einsum("bohw,bchwpq->ocpq", dy, cols, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        Ho, Wo = dy.shape[2], dy.shape[3]
        for p in range(k):
            for q in range(k):
                dx[:, :, p:p + Ho, q:q + Wo] += np.einsum("bohw,oc->bchw", dy, w[:, :, p, q])
    return dx, np.ascontiguousarray(dw), db
