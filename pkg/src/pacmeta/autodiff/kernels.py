"""Hot dense kernels: pairwise distances, jittered Cholesky, triangular solves.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and the environment
variable ``PACMETA_DISABLE_NUMBA`` is unset or ``0``; factorizations and
solves larger than ``NUMBA_MAX_ORDER`` always go to LAPACK, which is faster
there (see ``benchmarks/bench_kernels.py``).  All kernels accept batched
inputs with arbitrary leading dimensions.
"""

import os

import numpy as np
import scipy.linalg

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JITTER_INIT = 1e-8
JITTER_MAX = 1e-2


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even at maximum jitter."""


def numba_enabled():
    flag = os.environ.get("PACMETA_DISABLE_NUMBA", "0").strip().lower()
    return numba is not None and flag in ("", "0", "false", "no")


USE_NUMBA = numba_enabled()
# LAPACK overtakes the compiled loops for factorizations above this order
NUMBA_MAX_ORDER = 64


def _flatten_batch(a, core_ndim):
    lead = a.shape[: a.ndim - core_ndim]
    core = a.shape[a.ndim - core_ndim:]
    return np.ascontiguousarray(a.reshape((-1,) + core)), lead


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def sqdist_numpy(a, b):
    # explicit differences keep d(x, x) exactly zero; feature dimensions are tiny
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...k,...k->...", diff, diff)


def _cholesky_one_numpy(a):
    n = a.shape[0]
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(a) / n
    if not scale > 0:
        scale = 1.0
    rel = JITTER_INIT
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(a + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise SingularMatrixError("cholesky failed after maximum jitter")


def cholesky_numpy(a):
    flat, lead = _flatten_batch(a, 2)
    out = np.empty_like(flat)
    jit = np.zeros(flat.shape[0])
    for i in range(flat.shape[0]):
        out[i], jit[i] = _cholesky_one_numpy(flat[i])
    return out.reshape(a.shape), jit.reshape(lead)


def solve_lower_numpy(l, b, trans=False):
    l_flat, _ = _flatten_batch(l, 2)
    lb = np.broadcast_to(b, l.shape[:-2] + b.shape[-2:]) if b.ndim < l.ndim else b
    b_flat, _ = _flatten_batch(np.asarray(lb), 2)
    if l_flat.shape[0] == 1 and b_flat.shape[0] > 1:
        l_flat = np.broadcast_to(l_flat, (b_flat.shape[0],) + l_flat.shape[1:])
    out = np.empty(b_flat.shape)
    for i in range(b_flat.shape[0]):
        out[i] = scipy.linalg.solve_triangular(
            l_flat[i], b_flat[i], lower=True, trans=1 if trans else 0,
            check_finite=False)
    shape = np.broadcast_shapes(l.shape[:-2], b.shape[:-2]) + b.shape[-2:]
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _sqdist_nb(a, b):
        nb, n, d = a.shape
        m = b.shape[1]
        out = np.empty((nb, n, m))
        for t in range(nb):
            for i in range(n):
                for j in range(m):
                    s = 0.0
                    for k in range(d):
                        diff = a[t, i, k] - b[t, j, k]
                        s += diff * diff
                    out[t, i, j] = s
        return out

    @numba.njit(cache=True)
    def _chol_inplace(a, l, jitter):
        n = a.shape[0]
        for j in range(n):
            s = a[j, j] + jitter
            for k in range(j):
                s -= l[j, k] * l[j, k]
            if not s > 0.0:
                return False
            d = np.sqrt(s)
            l[j, j] = d
            for i in range(j + 1, n):
                t = a[i, j]
                for k in range(j):
                    t -= l[i, k] * l[j, k]
                l[i, j] = t / d
        return True

    @numba.njit(cache=True)
    def _cholesky_nb(a, init_rel, max_rel):
        nb, n, _ = a.shape
        out = np.zeros((nb, n, n))
        jit = np.zeros(nb)
        ok = np.ones(nb, dtype=np.bool_)
        for t in range(nb):
            if _chol_inplace(a[t], out[t], 0.0):
                continue
            scale = 0.0
            for i in range(n):
                scale += a[t, i, i]
            scale /= n
            if not scale > 0.0:
                scale = 1.0
            rel = init_rel
            done = False
            while rel <= max_rel * (1 + 1e-9):
                out[t, :, :] = 0.0
                if _chol_inplace(a[t], out[t], rel * scale):
                    jit[t] = rel * scale
                    done = True
                    break
                rel *= 10.0
            ok[t] = done
        return out, jit, ok

    @numba.njit(cache=True)
    def _solve_lower_nb(l, b):
        nb, n, r = b.shape
        out = b.copy()
        for t in range(nb):
            for i in range(n):
                for k in range(i):
                    lik = l[t, i, k]
                    for c in range(r):
                        out[t, i, c] -= lik * out[t, k, c]
                inv = 1.0 / l[t, i, i]
                for c in range(r):
                    out[t, i, c] *= inv
        return out

    @numba.njit(cache=True)
    def _solve_lower_t_nb(l, b):
        nb, n, r = b.shape
        out = b.copy()
        for t in range(nb):
            for i in range(n - 1, -1, -1):
                inv = 1.0 / l[t, i, i]
                for c in range(r):
                    out[t, i, c] *= inv
                # eliminate x_i from the remaining rows (column i of L)
                for k in range(i):
                    lik = l[t, i, k]
                    for c in range(r):
                        out[t, k, c] -= lik * out[t, i, c]
        return out


def sqdist_numba(a, b):
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3, _ = _flatten_batch(np.broadcast_to(a, shape + a.shape[-2:]), 2)
    b3, _ = _flatten_batch(np.broadcast_to(b, shape + b.shape[-2:]), 2)
    out = _sqdist_nb(a3.astype(np.float64), b3.astype(np.float64))
    return out.reshape(shape + (a.shape[-2], b.shape[-2]))


def cholesky_numba(a):
    flat, lead = _flatten_batch(np.asarray(a, dtype=np.float64), 2)
    out, jit, ok = _cholesky_nb(flat, JITTER_INIT, JITTER_MAX)
    if not ok.all():
        raise SingularMatrixError("cholesky failed after maximum jitter")
    return out.reshape(a.shape), jit.reshape(lead)


def solve_lower_numba(l, b, trans=False):
    shape = np.broadcast_shapes(l.shape[:-2], b.shape[:-2])
    l3, _ = _flatten_batch(np.broadcast_to(l, shape + l.shape[-2:]), 2)
    b3, _ = _flatten_batch(np.broadcast_to(b, shape + b.shape[-2:]), 2)
    fn = _solve_lower_t_nb if trans else _solve_lower_nb
    return fn(l3, b3.astype(np.float64)).reshape(shape + b.shape[-2:])


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def sqdist(a, b):
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    return sqdist_numba(a, b) if USE_NUMBA else sqdist_numpy(a, b)


def cholesky(a):
    """Lower Cholesky factor with jitter escalation.

    The plain matrix is tried first.  On failure ``1e-8 * trace(A)/n`` is
    added to the diagonal and multiplied by 10 until ``1e-2 * trace(A)/n``.
    Returns ``(L, jitter)`` with ``L @ L.T == A + jitter * I``.
    """
    if USE_NUMBA and a.shape[-1] <= NUMBA_MAX_ORDER:
        return cholesky_numba(a)
    return cholesky_numpy(a)


def solve_lower(l, b, trans=False):
    """Solve ``L X = B`` (or ``L.T X = B`` with ``trans``) for lower ``L``."""
    if USE_NUMBA and l.shape[-1] <= NUMBA_MAX_ORDER:
        return solve_lower_numba(l, b, trans)
    return solve_lower_numpy(l, b, trans)
