"""Vectorised numpy versions of the compiled kernels."""

from __future__ import annotations

import numpy as np


def cholesky_lower(a, rel_tol):
    p = a.shape[0]
    L = np.zeros((p, p))
    tol = rel_tol * max(float(np.max(np.diag(a))), 0.0)
    for j in range(p):
        row = L[j, :j]
        d = a[j, j] - row @ row
        if not d > tol:
            return L, j
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / L[j, j]
    return L, -1


def central_moment3(d):
    return np.einsum("ia,ib,ic->abc", d, d, d) / d.shape[0]


def central_moment4(d):
    return np.einsum("ia,ib,ic,id->abcd", d, d, d, d) / d.shape[0]


def lmm_terms(cross, z_idx, factor):
    total = cross.sum(axis=0)
    q = z_idx.shape[0]
    if q == 0:
        return 0.0, total
    ztw = cross[:, z_idx, :]
    ztz = ztw[:, :, z_idx]
    bb = np.einsum("tr,mtk->mrk", factor, ztw)
    mm = np.einsum("tr,mtu,us->mrs", factor, ztz, factor) + np.eye(q)
    try:
        lm = np.linalg.cholesky(mm)
    except np.linalg.LinAlgError:
        return np.nan, total
    logdet = 2.0 * np.log(np.diagonal(lm, axis1=1, axis2=2)).sum()
    t = np.linalg.solve(lm, bb)
    total = total - np.einsum("mrk,mrs->ks", t, t)
    return float(logdet), total
