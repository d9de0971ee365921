"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature. The
numpy versions are the fallback path and the readable reference.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, b):
    """Valid, stride-1 cross-correlation.

    x: (N, C, T), w: (F, C, K), b: (F,) -> (N, F, T - K + 1)
    """
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=2)  # (N, C, T', K)
    out = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # (N, T', F)
    out = out.transpose(0, 2, 1) + b[None, :, None]
    return np.ascontiguousarray(out)


def conv1d_backward(x, w, grad_out, need_input_grad=True):
    """Gradients of ``conv1d_forward`` w.r.t. input, weights and bias."""
    k = w.shape[2]
    t_out = grad_out.shape[2]
    win = sliding_window_view(x, k, axis=2)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2], [0, 2]))  # (F, C, K)
    grad_b = grad_out.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        grad_x = np.zeros_like(x)
        for j in range(k):
            # (N, F, T') x (F, C) -> (N, T', C)
            contrib = np.tensordot(grad_out, w[:, :, j], axes=([1], [0]))
            grad_x[:, :, j:j + t_out] += contrib.transpose(0, 2, 1)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def maxpool1d_forward(x, pool):
    """Non-overlapping max pool (stride == pool). Trailing remainder is dropped.

    Returns the pooled tensor and the argmax offset inside each window.
    """
    n, c, t = x.shape
    t_out = t // pool
    xr = x[:, :, :t_out * pool].reshape(n, c, t_out, pool)
    idx = np.argmax(xr, axis=3)
    out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool1d_backward(grad_out, idx, pool, t_in):
    n, c, t_out = grad_out.shape
    grad = np.zeros((n, c, t_out, pool), dtype=grad_out.dtype)
    np.put_along_axis(grad, idx[..., None], grad_out[..., None], axis=3)
    full = np.zeros((n, c, t_in), dtype=grad_out.dtype)
    full[:, :, :t_out * pool] = grad.reshape(n, c, t_out * pool)
    return full


def neuron_distances(reference, stacked):
    """Euclidean distance of each neuron to the same-index reference neuron.

    reference: (D, P), stacked: (K, D, P) -> (K, D)
    """
    diff = stacked - reference[None, :, :]
    return np.sqrt(np.einsum("kdp,kdp->kd", diff, diff))


def cost_matrix(a, b):
    """All-pairs Euclidean distances between rows of ``a`` (G, P) and ``b`` (D, P).

    Differences are formed explicitly (no |a|^2 + |b|^2 - 2ab expansion) so
    identical rows give an exact zero.
    """
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.sqrt(np.einsum("dp,dp->d", diff, diff))
    return out


def linear_sum_assignment(cost):
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m). Returns ``col_of_row`` as an int64 array.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row
