"""numba-compiled kernels. Same contracts as ``_numpy``."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def conv1d_forward(x, w, b):
    n, c, t = x.shape
    f, _, k = w.shape
    t_out = t - k + 1
    out = np.empty((n, f, t_out))
    for i in range(n):
        for o in range(f):
            for s in range(t_out):
                acc = b[o]
                for ch in range(c):
                    for j in range(k):
                        acc += x[i, ch, s + j] * w[o, ch, j]
                out[i, o, s] = acc
    return out


@njit(cache=True, nogil=True)
def _conv1d_backward(x, w, grad_out, need_input_grad):
    n, c, t = x.shape
    f, _, k = w.shape
    t_out = grad_out.shape[2]
    grad_w = np.zeros((f, c, k))
    grad_b = np.zeros(f)
    grad_x = np.zeros((n, c, t)) if need_input_grad else np.zeros((0, 0, 0))
    for i in range(n):
        for o in range(f):
            for s in range(t_out):
                g = grad_out[i, o, s]
                if g == 0.0:
                    continue
                grad_b[o] += g
                for ch in range(c):
                    for j in range(k):
                        grad_w[o, ch, j] += g * x[i, ch, s + j]
                        if need_input_grad:
                            grad_x[i, ch, s + j] += g * w[o, ch, j]
    return grad_x, grad_w, grad_b


def conv1d_backward(x, w, grad_out, need_input_grad=True):
    grad_x, grad_w, grad_b = _conv1d_backward(x, w, grad_out, need_input_grad)
    return (grad_x if need_input_grad else None), grad_w, grad_b


@njit(cache=True, nogil=True)
def maxpool1d_forward(x, pool):
    n, c, t = x.shape
    t_out = t // pool
    out = np.empty((n, c, t_out))
    idx = np.empty((n, c, t_out), dtype=np.int64)
    for i in range(n):
        for ch in range(c):
            for s in range(t_out):
                base = s * pool
                best = x[i, ch, base]
                arg = 0
                for j in range(1, pool):
                    val = x[i, ch, base + j]
                    if val > best:
                        best = val
                        arg = j
                out[i, ch, s] = best
                idx[i, ch, s] = arg
    return out, idx


@njit(cache=True, nogil=True)
def maxpool1d_backward(grad_out, idx, pool, t_in):
    n, c, t_out = grad_out.shape
    full = np.zeros((n, c, t_in))
    for i in range(n):
        for ch in range(c):
            for s in range(t_out):
                full[i, ch, s * pool + idx[i, ch, s]] = grad_out[i, ch, s]
    return full


@njit(cache=True, nogil=True)
def neuron_distances(reference, stacked):
    kk, d, p = stacked.shape
    out = np.empty((kk, d))
    for k in range(kk):
        for i in range(d):
            acc = 0.0
            for j in range(p):
                diff = stacked[k, i, j] - reference[i, j]
                acc += diff * diff
            out[k, i] = np.sqrt(acc)
    return out


@njit(cache=True, nogil=True)
def cost_matrix(a, b):
    g, p = a.shape
    d = b.shape[0]
    out = np.empty((g, d))
    for i in range(g):
        for j in range(d):
            acc = 0.0
            for q in range(p):
                diff = a[i, q] - b[j, q]
                acc += diff * diff
            out[i, j] = np.sqrt(acc)
    return out


@njit(cache=True, nogil=True)
def linear_sum_assignment(cost):
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row
