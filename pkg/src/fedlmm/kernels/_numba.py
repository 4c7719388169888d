"""Loop kernels compiled with numba.

These mirror :mod:`fedlmm.kernels._numpy` one for one; the two are checked
against each other in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import njit


@njit
def cholesky_lower(a, rel_tol):
    """Return ``(L, failed_column)``; ``failed_column`` is -1 on success."""
    p = a.shape[0]
    L = np.zeros((p, p))
    dmax = 0.0
    for i in range(p):
        if a[i, i] > dmax:
            dmax = a[i, i]
    tol = rel_tol * dmax
    for j in range(p):
        d = a[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > tol:
            return L, j
        ljj = math.sqrt(d)
        L[j, j] = ljj
        for i in range(j + 1, p):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / ljj
    return L, -1


@njit
def central_moment3(d):
    n, p = d.shape
    out = np.zeros((p, p, p))
    for a in range(p):
        for b in range(a, p):
            for c in range(b, p):
                s = 0.0
                for i in range(n):
                    s += d[i, a] * d[i, b] * d[i, c]
                s /= n
                out[a, b, c] = s
                out[a, c, b] = s
                out[b, a, c] = s
                out[b, c, a] = s
                out[c, a, b] = s
                out[c, b, a] = s
    return out


@njit
def _fill4(out, a, b, c, e, s):
    idx = (a, b, c, e)
    # all 24 permutations; duplicates just rewrite the same value
    for i0 in range(4):
        for i1 in range(4):
            if i1 == i0:
                continue
            for i2 in range(4):
                if i2 == i0 or i2 == i1:
                    continue
                i3 = 6 - i0 - i1 - i2
                out[idx[i0], idx[i1], idx[i2], idx[i3]] = s


@njit
def central_moment4(d):
    n, p = d.shape
    out = np.zeros((p, p, p, p))
    for a in range(p):
        for b in range(a, p):
            for c in range(b, p):
                for e in range(c, p):
                    s = 0.0
                    for i in range(n):
                        s += d[i, a] * d[i, b] * d[i, c] * d[i, e]
                    _fill4(out, a, b, c, e, s / n)
    return out


@njit
def lmm_terms(cross, z_idx, factor):
    """Sum over providers of ``log|M_h|`` and ``W_h' V_h^{-1} W_h``.

    ``cross`` is the (m, k, k) stack of per-provider ``W'W`` with
    ``W = [X | y]``; ``V_h = I + Z_h F F' Z_h'``, ``M_h = I + F' Z_h'Z_h F``.
    """
    m, k, _ = cross.shape
    q = z_idx.shape[0]
    total = np.zeros((k, k))
    logdet = 0.0
    ztz = np.zeros((q, q))
    ztw = np.zeros((q, k))
    mm = np.zeros((q, q))
    bb = np.zeros((q, k))
    lm = np.zeros((q, q))
    for h in range(m):
        for r in range(k):
            for s in range(k):
                total[r, s] += cross[h, r, s]
        if q == 0:
            continue
        for r in range(q):
            for s in range(q):
                ztz[r, s] = cross[h, z_idx[r], z_idx[s]]
            for s in range(k):
                ztw[r, s] = cross[h, z_idx[r], s]
        # bb = F' Z'W ; mm = I + F' Z'Z F
        for r in range(q):
            for s in range(k):
                acc = 0.0
                for t in range(q):
                    acc += factor[t, r] * ztw[t, s]
                bb[r, s] = acc
        for r in range(q):
            for s in range(q):
                acc = 0.0
                for t in range(q):
                    for u in range(q):
                        acc += factor[t, r] * ztz[t, u] * factor[u, s]
                mm[r, s] = acc + (1.0 if r == s else 0.0)
        # Cholesky of mm (always SPD: identity plus PSD)
        for j in range(q):
            dd = mm[j, j]
            for t in range(j):
                dd -= lm[j, t] * lm[j, t]
            if not dd > 0.0:
                return math.nan, total
            lm[j, j] = math.sqrt(dd)
            logdet += 2.0 * math.log(lm[j, j])
            for i in range(j + 1, q):
                acc = mm[i, j]
                for t in range(j):
                    acc -= lm[i, t] * lm[j, t]
                lm[i, j] = acc / lm[j, j]
            for i in range(j):
                lm[i, j] = 0.0
        # forward-substitute bb <- lm^{-1} bb, then subtract bb'bb
        for s in range(k):
            for r in range(q):
                acc = bb[r, s]
                for t in range(r):
                    acc -= lm[r, t] * bb[t, s]
                bb[r, s] = acc / lm[r, r]
        for r in range(k):
            for s in range(k):
                acc = 0.0
                for t in range(q):
                    acc += bb[t, r] * bb[t, s]
                total[r, s] -= acc
    return logdet, total
