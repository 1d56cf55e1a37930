"""Hot geometric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time:

    LRCNET_KERNELS=numba   (default, used when numba imports cleanly)
    LRCNET_KERNELS=numpy   (forces the reference numpy path)

Both paths compute squared distances with the same expression,
``dx*dx + dy*dy + dz*dz`` evaluated left to right, so index outputs agree
bitwise between backends. Ties are always broken toward the smaller index.
"""
import os

import numpy as np

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
    if not os.environ.get("NUMBA_THREADING_LAYER"):
        # skip probing for a TBB runtime that may be too old
        numba.config.THREADING_LAYER = "workqueue"

except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

BACKEND = os.environ.get("LRCNET_KERNELS", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"LRCNET_KERNELS must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAVE_NUMBA:
    BACKEND = "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def sqdist_numpy(a, b):
    """Squared distances between rows of a [A, 3] and rows of b [B, 3] -> [A, B]."""
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def fps_numpy(coords, m, start):
    n = coords.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(m):
        out[i] = cur
        d = sqdist_numpy(coords[cur:cur + 1], coords)[0]
        np.minimum(mind, d, out=mind)
        # selected points can never be re-picked, even among duplicates
        mind[cur] = -1.0
        if i + 1 < m:
            cur = int(np.argmax(mind))
    return out


def knn_numpy(coords, queries, k):
    d = sqdist_numpy(queries, coords)
    order = np.argsort(d, axis=1, kind="stable")
    n = coords.shape[0]
    if k <= n:
        return order[:, :k].astype(np.int64)
    pad = np.repeat(order[:, -1:], k - n, axis=1)
    return np.concatenate([order, pad], axis=1).astype(np.int64)


def scatter_rows_numpy(idx, w, grad, n_src):
    """Adjoint of ``out[a] = sum_i w[a, i] * src[idx[a, i]]``.

    idx, w: [A, k]; grad: [A, C] -> [n_src, C]
    """
    out = np.zeros((n_src, grad.shape[1]), dtype=grad.dtype)
    for i in range(idx.shape[1]):
        np.add.at(out, idx[:, i], w[:, i, None].astype(grad.dtype) * grad)
    return out


def max_argmax_numpy(x):
    """Max over axis 1 of x [G, K, C] and the first index attaining it."""
    arg = np.argmax(x, axis=1)
    return np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :], arg


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _sqdist_nb(a, b):
        na = a.shape[0]
        nb = b.shape[0]
        out = np.empty((na, nb))
        for i in range(na):
            for j in range(nb):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                dz = a[i, 2] - b[j, 2]
                out[i, j] = dx * dx + dy * dy + dz * dz
        return out

    @njit(cache=True)
    def _fps_nb(coords, m, start):
        n = coords.shape[0]
        out = np.empty(m, dtype=np.int64)
        mind = np.full(n, np.inf)
        cur = start
        for i in range(m):
            out[i] = cur
            best = -np.inf
            best_j = 0
            for j in range(n):
                dx = coords[cur, 0] - coords[j, 0]
                dy = coords[cur, 1] - coords[j, 1]
                dz = coords[cur, 2] - coords[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
            mind[cur] = -1.0
            for j in range(n):
                if mind[j] > best:
                    best = mind[j]
                    best_j = j
            cur = best_j
        return out

    @njit(cache=True)
    def _knn_nb(coords, queries, k):
        n = coords.shape[0]
        q = queries.shape[0]
        out = np.empty((q, k), dtype=np.int64)
        kk = min(k, n)
        bd = np.empty(kk)
        bi = np.empty(kk, dtype=np.int64)
        for i in range(q):
            # sorted top-kk buffer; points arrive in index order, so inserting
            # after equal distances reproduces a stable sort
            cnt = 0
            for j in range(n):
                dx = queries[i, 0] - coords[j, 0]
                dy = queries[i, 1] - coords[j, 1]
                dz = queries[i, 2] - coords[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if cnt == kk and not d < bd[kk - 1]:
                    continue
                p = cnt if cnt < kk else kk - 1
                while p > 0 and bd[p - 1] > d:
                    if p < kk:
                        bd[p] = bd[p - 1]
                        bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = d
                bi[p] = j
                if cnt < kk:
                    cnt += 1
            for t in range(k):
                out[i, t] = bi[t] if t < kk else bi[kk - 1]
        return out

    @njit(cache=True)
    def _scatter_rows_nb(idx, w, grad, n_src):
        a, k = idx.shape
        c = grad.shape[1]
        out = np.zeros((n_src, c), dtype=grad.dtype)
        # fixed accumulation order: neighbor slot outer, target row inner
        for i in range(k):
            for r in range(a):
                s = idx[r, i]
                wi = w[r, i]
                for ch in range(c):
                    out[s, ch] += wi * grad[r, ch]
        return out

    @njit(cache=True)
    def _max_argmax_nb(x):
        g, k, c = x.shape
        mx = np.empty((g, c), dtype=x.dtype)
        arg = np.zeros((g, c), dtype=np.int64)
        for gi in range(g):
            for ch in range(c):
                mx[gi, ch] = x[gi, 0, ch]
            for ki in range(1, k):
                for ch in range(c):
                    v = x[gi, ki, ch]
                    # strict comparison keeps the first maximum; NaN never wins
                    # but is caught by the caller's finiteness check
                    if v > mx[gi, ch]:
                        mx[gi, ch] = v
                        arg[gi, ch] = ki
        return mx, arg

    @njit(cache=True, parallel=True)
    def _fps_batch_nb(coords, m, starts):
        b = coords.shape[0]
        out = np.empty((b, m), dtype=np.int64)
        for i in prange(b):
            out[i] = _fps_nb(coords[i], m, starts[i])
        return out

    @njit(cache=True, parallel=True)
    def _knn_batch_nb(coords, queries, k):
        b = coords.shape[0]
        out = np.empty((b, queries.shape[1], k), dtype=np.int64)
        for i in prange(b):
            out[i] = _knn_nb(coords[i], queries[i], k)
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def sqdist(a, b, backend=None):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        return _sqdist_nb(a, b)
    return sqdist_numpy(a, b)


def fps(coords, m, start=0, backend=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        return _fps_nb(coords, int(m), int(start))
    return fps_numpy(coords, int(m), int(start))


def knn(coords, queries, k, backend=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        return _knn_nb(coords, queries, int(k))
    return knn_numpy(coords, queries, int(k))


def fps_batch(coords, m, starts, backend=None):
    """coords [B, N, 3], starts [B] -> [B, m]."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return _fps_batch_nb(coords, int(m), starts)
    return np.stack([fps_numpy(c, int(m), int(s)) for c, s in zip(coords, starts)])


def knn_batch(coords, queries, k, backend=None):
    """coords [B, N, 3], queries [B, Q, 3] -> [B, Q, k]."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if (backend or BACKEND) == "numba":
        return _knn_batch_nb(coords, queries, int(k))
    return np.stack([knn_numpy(c, q, int(k)) for c, q in zip(coords, queries)])


def scatter_rows(idx, w, grad, n_src, backend=None):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    grad = np.ascontiguousarray(grad)
    w = np.ascontiguousarray(w, dtype=grad.dtype)
    if (backend or BACKEND) == "numba":
        return _scatter_rows_nb(idx, w, grad, int(n_src))
    return scatter_rows_numpy(idx, w, grad, int(n_src))


def max_argmax(x, backend=None):
    """x [G, K, C] -> (max [G, C], argmax [G, C]) with first-index ties."""
    x = np.ascontiguousarray(x)
    if (backend or BACKEND) == "numba" and x.shape[1] > 0:
        return _max_argmax_nb(x)
    return max_argmax_numpy(x)


def set_num_threads(n):
    """Cap numba's worker pool; a no-op on the numpy path."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
