"""Leaf compute kernels.

Plain loop implementations jitted with numba (nogil, cached) are the default;
setting TASKGRID_NO_NUMBA=1 in the environment, or numba being unavailable,
selects the pure-numpy fallbacks instead.  Both implementation sets are kept
importable (NUMBA_IMPLS / NUMPY_IMPLS) so they can be benchmarked against
each other; see benchmarks/bench_kernels.py.

Dense kernels operate in place on C-contiguous float64 tiles, lower-triangle
convention throughout.  An application may substitute optimized kernels by
rebinding entries of IMPLS before building a program.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import KernelError


# -- pure numpy ----------------------------------------------------------

def _np_potrf(a):
    # unblocked Cholesky, lower, in place; returns failing row or -1
    n = a.shape[0]
    for j in range(n):
        d = a[j, j] - np.dot(a[j, :j], a[j, :j])
        if d <= 0.0:
            return j
        d = np.sqrt(d)
        a[j, j] = d
        if j + 1 < n:
            a[j + 1:, j] = (a[j + 1:, j] - a[j + 1:, :j] @ a[j, :j]) / d
    return -1


def _np_trsm(a, l):
    # solve X * L^T = A in place (right, lower, transposed)
    n = a.shape[1]
    for k in range(n):
        if k:
            a[:, k] -= a[:, :k] @ l[k, :k]
        a[:, k] /= l[k, k]
    return 0


def _np_syrk(c, a):
    # C -= A * A^T, lower triangle only
    t = a @ a.T
    il = np.tril_indices(c.shape[0])
    c[il] -= t[il]
    return 0


def _np_gemm(c, a, b):
    # C -= A * B^T
    c -= a @ b.T
    return 0


def _np_csr_matvec_add(y, indptr, indices, data, x):
    # y += CSR(indptr, indices, data) @ x
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    y += np.bincount(rows, weights=data * x[indices], minlength=len(y))
    return 0


def _np_waxpby(out, x, c, y):
    np.multiply(y, c, out=out)
    out += x
    return 0


def _np_rk4_combine(h, f1, f2, f3, f4, dt):
    h += (dt / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
    return 0


NUMPY_IMPLS = {
    "potrf": _np_potrf,
    "trsm": _np_trsm,
    "syrk": _np_syrk,
    "gemm": _np_gemm,
    "csr_matvec_add": _np_csr_matvec_add,
    "waxpby": _np_waxpby,
    "rk4_combine": _np_rk4_combine,
}


# -- numba ---------------------------------------------------------------

def _build_numba():
    from numba import njit

    jit = lambda f: njit(cache=True, nogil=True)(f)

    @jit
    def potrf(a):
        n = a.shape[0]
        for j in range(n):
            d = a[j, j]
            for k in range(j):
                d -= a[j, k] * a[j, k]
            if d <= 0.0:
                return j
            d = np.sqrt(d)
            a[j, j] = d
            for i in range(j + 1, n):
                s = a[i, j]
                for k in range(j):
                    s -= a[i, k] * a[j, k]
                a[i, j] = s / d
        return -1

    @jit
    def trsm(a, l):
        m, n = a.shape
        for i in range(m):
            for k in range(n):
                s = a[i, k]
                for j in range(k):
                    s -= a[i, j] * l[k, j]
                a[i, k] = s / l[k, k]
        return 0

    @jit
    def syrk(c, a):
        n, m = a.shape
        for i in range(n):
            for j in range(i + 1):
                s = 0.0
                for k in range(m):
                    s += a[i, k] * a[j, k]
                c[i, j] -= s
        return 0

    @jit
    def gemm(c, a, b):
        n, m = c.shape
        kk = a.shape[1]
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(kk):
                    s += a[i, k] * b[j, k]
                c[i, j] -= s
        return 0

    @jit
    def csr_matvec_add(y, indptr, indices, data, x):
        for i in range(len(indptr) - 1):
            s = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                s += data[p] * x[indices[p]]
            y[i] += s
        return 0

    @jit
    def waxpby(out, x, c, y):
        for i in range(len(out)):
            out[i] = x[i] + c * y[i]
        return 0

    @jit
    def rk4_combine(h, f1, f2, f3, f4, dt):
        c = dt / 6.0
        for i in range(len(h)):
            h[i] += c * (f1[i] + 2.0 * f2[i] + 2.0 * f3[i] + f4[i])
        return 0

    return {
        "potrf": potrf,
        "trsm": trsm,
        "syrk": syrk,
        "gemm": gemm,
        "csr_matvec_add": csr_matvec_add,
        "waxpby": waxpby,
        "rk4_combine": rk4_combine,
    }


def _want_numba() -> bool:
    return os.environ.get("TASKGRID_NO_NUMBA", "") in ("", "0")


NUMBA_IMPLS = None
if _want_numba():
    try:
        NUMBA_IMPLS = _build_numba()
    except ImportError:
        NUMBA_IMPLS = None

USING_NUMBA = NUMBA_IMPLS is not None
IMPLS = NUMBA_IMPLS if USING_NUMBA else NUMPY_IMPLS


# -- public wrappers -----------------------------------------------------

def potrf_tile(a, where=""):
    """In-place lower Cholesky of one tile; aborts on a non-SPD pivot."""
    bad = IMPLS["potrf"](a)
    if bad >= 0:
        raise KernelError(f"matrix not SPD: nonpositive pivot at row {bad} of {where or 'tile'}")


def trsm_tile(a, l):
    """a <- a * l^-T for a lower-triangular tile l, in place."""
    IMPLS["trsm"](a, l)


def syrk_tile(c, a):
    """c <- c - a a^T on the lower triangle, in place."""
    IMPLS["syrk"](c, a)


def gemm_tile(c, a, b):
    """c <- c - a b^T, in place."""
    IMPLS["gemm"](c, a, b)


def csr_matvec_add(y, indptr, indices, data, x):
    """y += CSR matrix times x (local indices)."""
    IMPLS["csr_matvec_add"](y, indptr, indices, data, x)


def waxpby(out, x, c, y):
    """out = x + c * y."""
    IMPLS["waxpby"](out, x, c, y)


def rk4_combine(h, f1, f2, f3, f4, dt):
    """h += dt/6 * (f1 + 2 f2 + 2 f3 + f4)."""
    IMPLS["rk4_combine"](h, f1, f2, f3, f4, dt)


def warmup():
    """Compile every jitted kernel on tiny inputs (no-op for numpy path)."""
    a = np.eye(4)
    potrf_tile(a)
    trsm_tile(np.ones((4, 4)), a)
    syrk_tile(np.zeros((4, 4)), np.ones((4, 2)))
    gemm_tile(np.zeros((4, 4)), np.ones((4, 2)), np.ones((4, 2)))
    csr_matvec_add(np.zeros(2), np.array([0, 1, 2]), np.array([0, 1]),
                   np.ones(2), np.ones(2))
    waxpby(np.zeros(4), np.ones(4), 0.5, np.ones(4))
    rk4_combine(np.zeros(4), np.ones(4), np.ones(4), np.ones(4), np.ones(4), 0.1)
