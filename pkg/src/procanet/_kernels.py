"""Compiled inner loops backing the fast convolution path.

Every kernel parallelises over independent output blocks only; the
reduction feeding one output element always runs in ascending index order
inside a single iteration, so results do not depend on the worker count.
"""
import numpy as np
from numba import njit, prange

_BLOCK = 256


@njit(parallel=True, cache=True, boundscheck=False)
def gemm(a, b):
    """``a @ b`` for C-contiguous matrices, accumulating in the input dtype."""
    m, k = a.shape
    p = b.shape[1]
    out = np.empty((m, p), dtype=a.dtype)
    nblk = (p + _BLOCK - 1) // _BLOCK
    for blk in prange(nblk):
        j0 = blk * _BLOCK
        j1 = min(j0 + _BLOCK, p)
        w = j1 - j0
        acc = np.empty((4, _BLOCK), dtype=a.dtype)
        i = 0
        while i < m:
            r = min(4, m - i)
            acc[:, :] = 0.0
            if r == 4:
                for kk in range(k):
                    a0 = a[i, kk]
                    a1 = a[i + 1, kk]
                    a2 = a[i + 2, kk]
                    a3 = a[i + 3, kk]
                    brow = b[kk, j0:j1]
                    for j in range(w):
                        bj = brow[j]
                        acc[0, j] += a0 * bj
                        acc[1, j] += a1 * bj
                        acc[2, j] += a2 * bj
                        acc[3, j] += a3 * bj
            else:
                for kk in range(k):
                    brow = b[kk, j0:j1]
                    for q in range(r):
                        aq = a[i + q, kk]
                        for j in range(w):
                            acc[q, j] += aq * brow[j]
            for q in range(r):
                for j in range(w):
                    out[i + q, j0 + j] = acc[q, j]
            i += 4
    return out


@njit(parallel=True, cache=True, boundscheck=False)
def im2col(x, k, pad):
    """Lower ``x`` (n, c, h, w) to a (c*k*k, n*h*w) patch matrix.

    Row order is (channel, kernel row, kernel col); column order is
    (batch, row, col). Out-of-bounds taps are zero.
    """
    n, c, h, w = x.shape
    cols = np.empty((c * k * k, n * h * w), dtype=x.dtype)
    for row in prange(c * k * k):
        ci = row // (k * k)
        i = (row // k) % k
        j = row % k
        dst = cols[row]
        x0 = max(0, pad - j)
        x1 = min(w, w + pad - j)
        for b in range(n):
            for y in range(h):
                sy = y + i - pad
                base = (b * h + y) * w
                if sy < 0 or sy >= h:
                    for xx in range(w):
                        dst[base + xx] = 0.0
                    continue
                for xx in range(x0):
                    dst[base + xx] = 0.0
                for xx in range(x0, x1):
                    dst[base + xx] = x[b, ci, sy, xx + j - pad]
                for xx in range(x1, w):
                    dst[base + xx] = 0.0
    return cols
