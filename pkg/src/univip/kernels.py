"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``UNIVIP_DISABLE_NUMBA=1`` (or numba's own ``NUMBA_DISABLE_JIT=1``) to run
the numpy versions. Both paths compute the same thing; ``benchmarks/`` times them.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_FLAG = os.environ.get("UNIVIP_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = _HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col_numpy(x, kh, kw, stride, pad):
    xp = _pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B, C, OH, OW, kh, kw
    b, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)


@_njit
def _im2col_loops(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b * oh * ow, c * kh * kw), dtype=xp.dtype)
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                row = (n * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            cols[row, col] = xp[n, ch, i * stride + u, j * stride + v]
                            col += 1
    return cols


def _im2col_numba(x, kh, kw, stride, pad):
    xp = np.ascontiguousarray(_pad(x, pad))
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    return _im2col_loops(xp, kh, kw, stride, oh, ow)


def _col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    patches = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += patches[
                :, :, :, :, u, v
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


@_njit
def _col2im_loops(cols, b, c, hp, wp, kh, kw, stride, oh, ow):
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                row = (n * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            out[n, ch, i * stride + u, j * stride + v] += cols[row, col]
                            col += 1
    return out


def _col2im_numba(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    out = _col2im_loops(
        np.ascontiguousarray(cols), b, c, h + 2 * pad, w + 2 * pad, kh, kw, stride, oh, ow
    )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``x`` (B, C, H, W) into rows of receptive fields, shape (B*OH*OW, C*kh*kw)."""
    if USE_NUMBA:
        return _im2col_numba(x, kh, kw, stride, pad)
    return _im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back to (B, C, H, W)."""
    if USE_NUMBA:
        return _col2im_numba(cols, x_shape, kh, kw, stride, pad)
    return _col2im_numpy(cols, x_shape, kh, kw, stride, pad)


# ---------------------------------------------------------------------------
# Graph segmentation (union-find over sorted edges)
# ---------------------------------------------------------------------------


@_njit
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@_njit
def _segment_loops(n, ea, eb, ew, k, min_size):
    parent = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)
    thresh = np.full(n, k, dtype=np.float64)
    m = ea.shape[0]
    for e in range(m):
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a == b:
            continue
        w = ew[e]
        if w <= thresh[a] and w <= thresh[b]:
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if rank[a] == rank[b]:
                rank[a] += 1
            thresh[a] = w + k / size[a]
    for e in range(m):
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a != b and (size[a] < min_size or size[b] < min_size):
            if rank[a] < rank[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if rank[a] == rank[b]:
                rank[a] += 1
    roots = np.empty(n, dtype=np.int64)
    for i in range(n):
        roots[i] = _find(parent, i)
    return roots


def _segment_python(n, ea, eb, ew, k, min_size):
    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    thresh = [float(k)] * n

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(a, b):
        if rank[a] < rank[b]:
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
        if rank[a] == rank[b]:
            rank[a] += 1
        return a

    ea_l, eb_l, ew_l = ea.tolist(), eb.tolist(), ew.tolist()
    for a, b, w in zip(ea_l, eb_l, ew_l):
        a, b = find(a), find(b)
        if a != b and w <= thresh[a] and w <= thresh[b]:
            r = union(a, b)
            thresh[r] = w + k / size[r]
    for a, b in zip(ea_l, eb_l):
        a, b = find(a), find(b)
        if a != b and (size[a] < min_size or size[b] < min_size):
            union(a, b)
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def segment_edges(n, ea, eb, ew, k, min_size):
    """Union-find segmentation over edges already sorted by weight.

    Returns the root id of every vertex. The merge predicate is the usual
    internal-difference test with threshold ``k / |C|``; a second pass merges
    any component smaller than ``min_size`` into a neighbour.
    """
    ea = np.ascontiguousarray(ea, dtype=np.int64)
    eb = np.ascontiguousarray(eb, dtype=np.int64)
    ew = np.ascontiguousarray(ew, dtype=np.float64)
    if USE_NUMBA:
        return _segment_loops(n, ea, eb, ew, float(k), int(min_size))
    return _segment_python(n, ea, eb, ew, float(k), int(min_size))


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn
# ---------------------------------------------------------------------------


@_njit
def _lse_rows(M):
    r, c = M.shape
    out = np.empty(r)
    for i in range(r):
        mx = -np.inf
        for j in range(c):
            if M[i, j] > mx:
                mx = M[i, j]
        if mx == -np.inf:
            out[i] = -np.inf
            continue
        s = 0.0
        for j in range(c):
            s += np.exp(M[i, j] - mx)
        out[i] = mx + np.log(s)
    return out


@_njit
def _sinkhorn_loops(C, log_a, log_b, eps, max_iter, tol):
    m, n = C.shape
    f = np.zeros(m)
    g = np.zeros(n)
    a = np.exp(log_a)
    b = np.exp(log_b)
    duals = np.empty(max_iter + 1)
    duals[0] = _dual_value(C, f, g, a, b, eps)
    it = 0
    converged = False
    M = np.empty((m, n))
    Mt = np.empty((n, m))
    while it < max_iter:
        for i in range(m):
            for j in range(n):
                M[i, j] = (g[j] - C[i, j]) / eps
        lse = _lse_rows(M)
        for i in range(m):
            f[i] = eps * log_b[i] - eps * lse[i] if log_b[i] > -np.inf else -np.inf
        for j in range(n):
            for i in range(m):
                Mt[j, i] = (f[i] - C[i, j]) / eps
        lse = _lse_rows(Mt)
        for j in range(n):
            g[j] = eps * log_a[j] - eps * lse[j] if log_a[j] > -np.inf else -np.inf
        it += 1
        duals[it] = _dual_value(C, f, g, a, b, eps)
        viol = 0.0
        for i in range(m):
            s = 0.0
            for j in range(n):
                s += np.exp((f[i] + g[j] - C[i, j]) / eps)
            d = abs(s - b[i])
            if d > viol:
                viol = d
        if viol < tol:
            converged = True
            break
    return f, g, it, converged, duals[: it + 1]


@_njit
def _dual_value(C, f, g, a, b, eps):
    m, n = C.shape
    val = 0.0
    for i in range(m):
        if b[i] > 0:
            val += f[i] * b[i]
    for j in range(n):
        if a[j] > 0:
            val += g[j] * a[j]
    mass = 0.0
    for i in range(m):
        for j in range(n):
            mass += np.exp((f[i] + g[j] - C[i, j]) / eps)
    return val - eps * mass + eps


def _lse(M, axis):
    mx = np.max(M, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(M - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def _dual_numpy(C, f, g, a, b, eps):
    with np.errstate(invalid="ignore"):
        lin = np.sum(np.where(b > 0, f * b, 0.0)) + np.sum(np.where(a > 0, g * a, 0.0))
    mass = np.sum(np.exp((f[:, None] + g[None, :] - C) / eps))
    return lin - eps * mass + eps


def _sinkhorn_numpy(C, log_a, log_b, eps, max_iter, tol):
    m, n = C.shape
    f = np.zeros(m)
    g = np.zeros(n)
    a, b = np.exp(log_a), np.exp(log_b)
    duals = [_dual_numpy(C, f, g, a, b, eps)]
    converged = False
    it = 0
    while it < max_iter:
        f = np.where(b > 0, eps * log_b - eps * _lse((g[None, :] - C) / eps, axis=1), -np.inf)
        g = np.where(a > 0, eps * log_a - eps * _lse((f[:, None] - C) / eps, axis=0), -np.inf)
        it += 1
        duals.append(_dual_numpy(C, f, g, a, b, eps))
        rows = np.exp((f[:, None] + g[None, :] - C) / eps).sum(axis=1)
        if np.max(np.abs(rows - b)) < tol:
            converged = True
            break
    return f, g, it, converged, np.array(duals)


def sinkhorn_log(C, a, b, eps, max_iter, tol):
    """Log-domain Sinkhorn scaling. Rows carry mass ``b``, columns mass ``a``.

    Returns dual potentials ``(f, g)``, iteration count, a converged flag and
    the dual objective after every iteration (index 0 is the initial value).
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    if USE_NUMBA:
        return _sinkhorn_loops(C, log_a, log_b, float(eps), int(max_iter), float(tol))
    return _sinkhorn_numpy(C, log_a, log_b, float(eps), int(max_iter), float(tol))


# ---------------------------------------------------------------------------
# Newton polish on the semi-dual (small K, rarely needed)
# ---------------------------------------------------------------------------


def _semi_dual(C, a, b, eps, g):
    with np.errstate(over="ignore", invalid="ignore"):
        f = eps * np.log(b) - eps * _lse((g[None, :] - C) / eps, axis=1)
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        return f, P, f @ b + g @ a - eps * P.sum() + eps


def newton_polish(C, a, b, eps, g, tol, max_steps):
    """Damped Newton ascent on the semi-dual in ``g``, started from Sinkhorn's potentials.

    Sinkhorn crawls when the plan splits into blocks joined only through
    entries of ``exp(-C / eps)`` that are many orders of magnitude below the
    rest. The semi-dual is smooth and concave, so Newton steps with a
    backtracking line search finish the job. Steps are capped at the largest
    potential shift a solution can need. Rows and columns with zero mass stay
    at -inf. Returns ``(f, g, steps, converged, duals)``; duals never decrease.
    """
    rows, cols = b > 0, a > 0
    Cs = C[np.ix_(rows, cols)]
    aa, bb = a[cols], b[rows]
    gs = g[cols].copy()
    radius = np.ptp(Cs) + eps * (np.log(aa.max() / aa.min()) + np.log(bb.max() / bb.min())) + eps
    f, P, D = _semi_dual(Cs, aa, bb, eps, gs)
    duals = [D]
    converged, steps = False, 0
    while True:
        grad = aa - P.sum(axis=0)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        if steps >= max_steps:
            break
        H = (np.diag(P.sum(axis=0)) - (P.T / bb) @ P) / eps
        w, V = np.linalg.eigh(H)
        # weakly coupled blocks show up as near-zero curvature: floor it and
        # let the step cap plus line search choose the length
        w = np.maximum(w, max(1e-9 * w.max(), 1e-300))
        d = V @ ((V.T @ grad) / w)
        d -= d.mean()
        span = np.max(np.abs(d))
        if not np.isfinite(span) or span == 0:
            d, span = grad - grad.mean(), np.max(np.abs(grad - grad.mean()))
        if span > radius:
            d *= radius / span
        t = 1.0
        for _ in range(80):
            f_new, P_new, D_new = _semi_dual(Cs, aa, bb, eps, gs + t * d)
            if D_new > D:
                break
            t *= 0.5
        else:
            break  # no ascent left at working precision
        gs, f, P, D = gs + t * d, f_new, P_new, D_new
        duals.append(D)
        steps += 1
    f_full = np.full(C.shape[0], -np.inf)
    g_full = np.full(C.shape[1], -np.inf)
    f_full[rows], g_full[cols] = f, gs
    return f_full, g_full, steps, converged, np.array(duals)
