"""Numba kernels for an up-looking sparse Cholesky factorization.

The factor is stored in CSC form with sorted row indices and the diagonal
entry first in every column.  ``takahashi`` fills the entries of the inverse
on the pattern of the factor (selected inversion).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def etree(Ap, Ai, n):
    """Elimination tree of a symmetric matrix given by its full CSC pattern."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Ap, Ai, k, parent, s, w):
    # Pattern of row k of L, returned in s[top:n] in topological order.
    n = parent.shape[0]
    top = n
    w[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while w[i] != k:
            s[length] = i
            length += 1
            w[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def column_counts(Ap, Ai, parent):
    n = parent.shape[0]
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        for idx in range(top, n):
            counts[s[idx]] += 1
    return counts


@njit(cache=True)
def numeric(Ap, Ai, Ax, parent, Lp):
    """Returns (Li, Lx, failed_pivot); failed_pivot is -1 on success."""
    n = parent.shape[0]
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    c = Lp[:n].copy()
    x = np.zeros(n)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i <= k:
                x[i] += Ax[p]
        d = x[k]
        x[k] = 0.0
        for idx in range(top, n):
            j = s[idx]
            lkj = x[j] / Lx[Lp[j]]
            x[j] = 0.0
            for p in range(Lp[j] + 1, c[j]):
                x[Li[p]] -= Lx[p] * lkj
            d -= lkj * lkj
            p = c[j]
            c[j] += 1
            Li[p] = k
            Lx[p] = lkj
        if not d > 0.0:
            return Li, Lx, k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1


@njit(cache=True)
def lsolve(Lp, Li, Lx, b):
    x = b.copy()
    n = Lp.shape[0] - 1
    for col in range(x.shape[1]):
        for j in range(n):
            x[j, col] /= Lx[Lp[j]]
            xj = x[j, col]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p], col] -= Lx[p] * xj
    return x


@njit(cache=True)
def ltsolve(Lp, Li, Lx, b):
    x = b.copy()
    n = Lp.shape[0] - 1
    for col in range(x.shape[1]):
        for j in range(n - 1, -1, -1):
            acc = x[j, col]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                acc -= Lx[p] * x[Li[p], col]
            x[j, col] = acc / Lx[Lp[j]]
    return x


@njit(cache=True)
def _lookup(Lp, Li, S, r, c):
    lo = Lp[c]
    hi = Lp[c + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        v = Li[mid]
        if v == r:
            return S[mid]
        if v < r:
            lo = mid + 1
        else:
            hi = mid - 1
    # the filled pattern is closed under the recursion, so this is unreachable
    return np.nan


@njit(cache=True)
def takahashi(Lp, Li, Lx):
    """Entries of the inverse on the pattern of L (lower triangle, aligned with Li)."""
    n = Lp.shape[0] - 1
    S = np.zeros(Lx.shape[0])
    for j in range(n - 1, -1, -1):
        ljj = Lx[Lp[j]]
        start = Lp[j] + 1
        end = Lp[j + 1]
        for q in range(end - 1, start - 1, -1):
            i = Li[q]
            acc = 0.0
            for p in range(start, end):
                k = Li[p]
                if k >= i:
                    acc += Lx[p] * _lookup(Lp, Li, S, k, i)
                else:
                    acc += Lx[p] * _lookup(Lp, Li, S, i, k)
            S[q] = -acc / ljj
        acc = 0.0
        for p in range(start, end):
            acc += Lx[p] * S[p]
        S[Lp[j]] = 1.0 / (ljj * ljj) - acc / ljj
    return S
