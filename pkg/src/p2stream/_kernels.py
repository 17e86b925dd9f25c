"""Fused per-slice update kernel, JIT-compiled when numba is available.

One streaming update touches every slice in the batch with a handful of
small dense operations each; issuing them as separate numpy calls costs more
in dispatch and temporaries than in arithmetic once slices number in the
hundreds.  This kernel runs the whole per-slice phase (row-factor solve,
summary accumulation, S-row solve, global-summary contributions) in a single
compiled pass over a stack of equal-height slices, keeping the update cost
proportional to the data itself.  The two data-sized matrix products
(projecting rows onto V, and the F contribution) stay outside as single BLAS
calls.  ``stream`` falls back to the pure-numpy group path when numba is
missing; both paths implement identical arithmetic.
"""
from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _chol_solve_inplace(a, b):
    """Lower-Cholesky factorize ``a`` in place and solve ``a x = b`` into ``b``.

    Returns False when ``a`` is not positive definite (or not finite), so the
    caller can re-run the slice through the attributing solve path.
    """
    n = a.shape[0]
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0 or not np.isfinite(s):
            return False
        piv = np.sqrt(s)
        a[j, j] = piv
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / piv
    m = b.shape[1]
    for col in range(m):
        for i in range(n):
            s = b[i, col]
            for k in range(i):
                s -= a[i, k] * b[k, col]
            b[i, col] = s / a[i, i]
        for i in range(n - 1, -1, -1):
            s = b[i, col]
            for k in range(i + 1, n):
                s -= a[k, i] * b[k, col]
            b[i, col] = s / a[i, i]
    return True


def _group_update(xv, vtv, s_used, c_old, d_old, lam, eps):
    """Per-slice update phase over a stack of equal-height slices.

    ``xv`` holds the rows already projected onto the column factor, one
    (I, R) block per slice.  Returns ``(u, us, c_new, d_new, w, g_fresh,
    ok)`` where ``us`` is ``u`` scaled by the refreshed S rows (the caller
    turns it into the F contribution with one matrix product) and ``ok``
    False signals a non-positive-definite system somewhere in the stack.
    """
    G, I, R = xv.shape
    u = np.empty((G, I, R))
    us = np.empty((G, I, R))
    c_new = np.empty((G, R))
    d_new = np.empty((G, R, R))
    w = np.empty((G, R))
    g_fresh = np.zeros((R, R))
    a = np.empty((R, R))
    rhs = np.empty((R, I))
    gram = np.empty((R, R))
    wcol = np.empty((R, 1))
    ok = True
    for g in range(G):
        s = s_used[g]

        # row-factor solve: lhs = vtv * (s s^T) plus relative ridge
        shift = 0.0
        for r in range(R):
            shift += vtv[r, r] * s[r] * s[r]
        shift = eps * shift / R
        for r in range(R):
            for z in range(R):
                a[r, z] = vtv[r, z] * s[r] * s[z]
            a[r, r] += shift
            for i in range(I):
                rhs[r, i] = xv[g, i, r] * s[r]
        if not _chol_solve_inplace(a, rhs):
            ok = False
        for i in range(I):
            for r in range(R):
                u[g, i, r] = rhs[r, i]

        # per-slice summaries: c and the Gram of the new row factors
        for r in range(R):
            acc = 0.0
            for i in range(I):
                acc += xv[g, i, r] * u[g, i, r]
            c_new[g, r] = lam * c_old[g, r] + acc
        for r in range(R):
            for z in range(r, R):
                acc = 0.0
                for i in range(I):
                    acc += u[g, i, r] * u[g, i, z]
                gram[r, z] = acc
                gram[z, r] = acc
        for r in range(R):
            for z in range(R):
                d_new[g, r, z] = lam * d_old[g, r, z] + gram[r, z]

        # S-row solve: lhs = vtv * d_new plus relative ridge
        shift = 0.0
        for r in range(R):
            shift += vtv[r, r] * d_new[g, r, r]
        shift = eps * shift / R
        for r in range(R):
            for z in range(R):
                a[r, z] = vtv[r, z] * d_new[g, r, z]
            a[r, r] += shift
            wcol[r, 0] = c_new[g, r]
        if not _chol_solve_inplace(a, wcol):
            ok = False
        for r in range(R):
            if not np.isfinite(wcol[r, 0]):
                ok = False
            w[g, r] = wcol[r, 0]

        # contributions to the global summaries, with the refreshed S row
        for i in range(I):
            for r in range(R):
                us[g, i, r] = u[g, i, r] * w[g, r]
        for r in range(R):
            for z in range(R):
                g_fresh[r, z] += gram[r, z] * w[g, r] * w[g, z]
    return u, us, c_new, d_new, w, g_fresh, ok


if HAVE_NUMBA:
    _chol_solve_inplace = numba.njit(cache=True)(_chol_solve_inplace)
    group_update = numba.njit(cache=True)(_group_update)
else:  # pragma: no cover - exercised only without numba
    group_update = None
