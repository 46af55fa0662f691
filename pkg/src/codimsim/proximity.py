"""Primitive-pair distances with exact first and second derivatives.

Distances are evaluated on squared distance and split into the smooth
sub-cases of the standard point-edge / point-triangle / edge-edge region
decomposition.  Every sub-case reduces to one of four closed forms:

* point-point   ``|p - q|^2``
* point-line    ``|(e0 - p) x (e1 - p)|^2 / |e1 - e0|^2``
* point-plane   ``((p - t0) . n)^2 / |n|^2`` with ``n = (t1 - t0) x (t2 - t0)``
* line-line     ``((b0 - a0) . n)^2 / |n|^2`` with ``n = (a1 - a0) x (b1 - b0)``

The numba kernels work on a stencil array ``X`` of shape (4, 3); only the
first 2/3/4 rows are read for PP/PE/(PT, EE) stencils.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

# stencil kinds (also used as sub-case kinds)
PP, PE, PT, EE = 0, 1, 2, 3
STENCIL_SIZE = np.array([2, 3, 4, 4], dtype=np.int64)
PARALLEL_THRESHOLD = 1e-10


class DegenerateError(ValueError):
    pass


class PairKind(enum.Enum):
    POINT_POINT = PP
    POINT_EDGE = PE
    POINT_TRIANGLE = PT
    EDGE_EDGE = EE

    @property
    def n_vertices(self) -> int:
        return int(STENCIL_SIZE[self.value])


# ---------------------------------------------------------------------------
# sub-case classification
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@nb.njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@nb.njit(cache=True)
def _dd(X, i, j, k, l):
    """(X[i] - X[j]) . (X[k] - X[l]) without temporaries."""
    return ((X[i, 0] - X[j, 0]) * (X[k, 0] - X[l, 0]) + (X[i, 1] - X[j, 1]) * (X[k, 1] - X[l, 1])
            + (X[i, 2] - X[j, 2]) * (X[k, 2] - X[l, 2]))


@nb.njit(cache=True)
def _cr(X, i, j, k, l):
    """(X[i] - X[j]) x (X[k] - X[l]) as a scalar triple."""
    u0, u1, u2 = X[i, 0] - X[j, 0], X[i, 1] - X[j, 1], X[i, 2] - X[j, 2]
    v0, v1, v2 = X[k, 0] - X[l, 0], X[k, 1] - X[l, 1], X[k, 2] - X[l, 2]
    return u1 * v2 - u2 * v1, u2 * v0 - u0 * v2, u0 * v1 - u1 * v0


@nb.njit(cache=True)
def _pe_type_rows(X, ip, ie0, ie1):
    t = _dd(X, ip, ie0, ie1, ie0) / _dd(X, ie1, ie0, ie1, ie0)
    if t <= 0.0:
        return 0
    if t >= 1.0:
        return 1
    return 2


@nb.njit(cache=True)
def point_edge_type(p, e0, e1):
    """0 -> closest to e0, 1 -> closest to e1, 2 -> edge interior."""
    X = np.empty((3, 3))
    X[0] = p
    X[1] = e0
    X[2] = e1
    return _pe_type_rows(X, 0, 1, 2)


@nb.njit(cache=True)
def _pt_region_rows(X, ip, ia, ib, ic):
    d1 = _dd(X, ib, ia, ip, ia)
    d2 = _dd(X, ic, ia, ip, ia)
    if d1 <= 0.0 and d2 <= 0.0:
        return 1
    d3 = _dd(X, ib, ia, ip, ib)
    d4 = _dd(X, ic, ia, ip, ib)
    if d3 >= 0.0 and d4 <= d3:
        return 2
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return 4
    d5 = _dd(X, ib, ia, ip, ic)
    d6 = _dd(X, ic, ia, ip, ic)
    if d6 >= 0.0 and d5 <= d6:
        return 3
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return 6
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return 5
    return 0


@nb.njit(cache=True)
def point_triangle_region(p, a, b, c):
    """Voronoi region of the closest triangle feature.

    0 face, 1/2/3 vertex a/b/c, 4 edge ab, 5 edge bc, 6 edge ca.
    """
    X = np.empty((4, 3))
    X[0] = p
    X[1] = a
    X[2] = b
    X[3] = c
    return _pt_region_rows(X, 0, 1, 2, 3)


@nb.njit(cache=True)
def _pe_sub(X, ip, ie0, ie1):
    t = _pe_type_rows(X, ip, ie0, ie1)
    if t == 0:
        return PP, ip, ie0, -1, -1
    if t == 1:
        return PP, ip, ie1, -1, -1
    return PE, ip, ie0, ie1, -1


@nb.njit(cache=True)
def _sq_pe_rows(X, ip, ie0, ie1):
    t = _pe_type_rows(X, ip, ie0, ie1)
    if t == 0:
        return _dd(X, ip, ie0, ip, ie0)
    if t == 1:
        return _dd(X, ip, ie1, ip, ie1)
    w0, w1, w2 = _cr(X, ie0, ip, ie1, ip)
    return (w0 * w0 + w1 * w1 + w2 * w2) / _dd(X, ie1, ie0, ie1, ie0)


@nb.njit(cache=True)
def classify(kind, X):
    """Active smooth sub-case of a stencil as (sub_kind, i0, i1, i2, i3).

    Indices point into the stencil rows; unused slots are -1.  PE sub-cases
    are ordered (point, edge0, edge1), PT (point, tri0, tri1, tri2) and EE
    (a0, a1, b0, b1).
    """
    if kind == PP:
        return PP, 0, 1, -1, -1
    if kind == PE:
        return _pe_sub(X, 0, 1, 2)
    if kind == PT:
        r = _pt_region_rows(X, 0, 1, 2, 3)
        if r == 0:
            return PT, 0, 1, 2, 3
        if r <= 3:
            return PP, 0, r, -1, -1
        if r == 4:
            return PE, 0, 1, 2, -1
        if r == 5:
            return PE, 0, 2, 3, -1
        return PE, 0, 3, 1, -1
    # edge-edge: a0, a1, b0, b1 = rows 0..3
    a = _dd(X, 1, 0, 1, 0)
    e = _dd(X, 3, 2, 3, 2)
    c0, c1, c2 = _cr(X, 1, 0, 3, 2)
    if c0 * c0 + c1 * c1 + c2 * c2 < PARALLEL_THRESHOLD * a * e:
        # parallel: best of the four endpoint-vs-edge distances
        best = np.inf
        out = (PP, 0, 2, -1, -1)
        cand = ((0, 2, 3), (1, 2, 3), (2, 0, 1), (3, 0, 1))
        for k in range(4):
            ip, i0, i1 = cand[k]
            s = _sq_pe_rows(X, ip, i0, i1)
            if s < best:
                best = s
                out = _pe_sub(X, ip, i0, i1)
        return out
    f = _dd(X, 3, 2, 0, 2)
    c = _dd(X, 1, 0, 0, 2)
    b = _dd(X, 1, 0, 3, 2)
    denom = a * e - b * b
    s = (b * f - c * e) / denom
    s = min(max(s, 0.0), 1.0)
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    s_in = 0.0 < s < 1.0
    t_in = 0.0 < t < 1.0
    if s_in and t_in:
        return EE, 0, 1, 2, 3
    ia = 0 if s <= 0.0 else 1
    ib = 2 if t <= 0.0 else 3
    if t_in:
        return PE, ia, 2, 3, -1
    if s_in:
        return PE, ib, 0, 1, -1
    return PP, ia, ib, -1, -1


# ---------------------------------------------------------------------------
# squared-distance closed forms with derivatives (reduced coordinates)
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _skew(a):
    m = np.zeros((3, 3))
    m[0, 1] = -a[2]
    m[0, 2] = a[1]
    m[1, 0] = a[2]
    m[1, 2] = -a[0]
    m[2, 0] = -a[1]
    m[2, 1] = a[0]
    return m


@nb.njit(cache=True)
def _sel(n, blocks):
    # 3 x 3n selection matrix with +/-I placed per vertex slot
    m = np.zeros((3, 3 * n))
    for k in range(n):
        c = blocks[k]
        if c != 0.0:
            for d in range(3):
                m[d, 3 * k + d] = c
    return m


@nb.njit(cache=True)
def _cross_derivs(u, v, U, V):
    """Jacobian of u x v and the bilinear Hessian builder."""
    return -_skew(v) @ U + _skew(u) @ V


@nb.njit(cache=True)
def _sym_bilinear(w, U, V):
    # Hessian of w . (u x v) for constant w
    M = U.T @ (_skew(w).T @ V)
    return M + M.T


@nb.njit(cache=True)
def _sq_pp(p, q, hess):
    d = p - q
    s = _dot(d, d)
    g = np.empty(6)
    g[:3] = 2.0 * d
    g[3:] = -2.0 * d
    H = np.zeros((6, 6))
    if hess:
        for k in range(3):
            H[k, k] = 2.0
            H[k + 3, k + 3] = 2.0
            H[k, k + 3] = -2.0
            H[k + 3, k] = -2.0
    return s, g, H


@nb.njit(cache=True)
def _sq_pe(p, e0, e1, hess):
    U = _sel(3, (-1.0, 1.0, 0.0))
    V = _sel(3, (-1.0, 0.0, 1.0))
    u = e0 - p
    v = e1 - p
    w = _cross(u, v)
    Jw = _cross_derivs(u, v, U, V)
    q = _dot(w, w)
    gq = 2.0 * (Jw.T @ w)
    E = V - U
    e = v - u
    den = _dot(e, e)
    gd = 2.0 * (E.T @ e)
    s = q / den
    g = gq / den - q * gd / (den * den)
    H = np.zeros((9, 9))
    if hess:
        Hq = 2.0 * (Jw.T @ Jw) + 2.0 * _sym_bilinear(w, U, V)
        Hd = 2.0 * (E.T @ E)
        H = (Hq / den
             - (np.outer(gq, gd) + np.outer(gd, gq)) / (den * den)
             - q * Hd / (den * den)
             + 2.0 * q * np.outer(gd, gd) / (den * den * den))
    return s, g, H


@nb.njit(cache=True)
def _sq_triple(a, u, v, A, U, V, hess):
    # (a . (u x v))^2 / |u x v|^2
    n = _cross(u, v)
    Jn = _cross_derivs(u, v, U, V)
    f = _dot(a, n)
    gf = A.T @ n + Jn.T @ a
    den = _dot(n, n)
    gd = 2.0 * (Jn.T @ n)
    s = f * f / den
    g = 2.0 * f * gf / den - f * f * gd / (den * den)
    m = A.shape[1]
    H = np.zeros((m, m))
    if hess:
        Hf = A.T @ Jn + Jn.T @ A + _sym_bilinear(a, U, V)
        Hd = 2.0 * (Jn.T @ Jn) + 2.0 * _sym_bilinear(n, U, V)
        d2 = den * den
        H = ((2.0 * np.outer(gf, gf) + 2.0 * f * Hf) / den
             - 2.0 * f * (np.outer(gf, gd) + np.outer(gd, gf)) / d2
             - f * f * Hd / d2
             + 2.0 * f * f * np.outer(gd, gd) / (d2 * den))
    return s, g, H


@nb.njit(cache=True)
def _sq_pt(p, t0, t1, t2, hess):
    A = _sel(4, (1.0, -1.0, 0.0, 0.0))
    U = _sel(4, (0.0, -1.0, 1.0, 0.0))
    V = _sel(4, (0.0, -1.0, 0.0, 1.0))
    return _sq_triple(p - t0, t1 - t0, t2 - t0, A, U, V, hess)


@nb.njit(cache=True)
def _sq_ee(a0, a1, b0, b1, hess):
    A = _sel(4, (-1.0, 0.0, 1.0, 0.0))
    U = _sel(4, (-1.0, 1.0, 0.0, 0.0))
    V = _sel(4, (0.0, 0.0, -1.0, 1.0))
    return _sq_triple(b0 - a0, a1 - a0, b1 - b0, A, U, V, hess)


@nb.njit(cache=True)
def sub_sqdist(sub, i0, i1, i2, i3, X):
    if sub == PP:
        return _dd(X, i0, i1, i0, i1)
    if sub == PE:
        w0, w1, w2 = _cr(X, i1, i0, i2, i0)
        return (w0 * w0 + w1 * w1 + w2 * w2) / _dd(X, i2, i1, i2, i1)
    if sub == PT:
        n0, n1, n2 = _cr(X, i2, i1, i3, i1)
        f = ((X[i0, 0] - X[i1, 0]) * n0 + (X[i0, 1] - X[i1, 1]) * n1
             + (X[i0, 2] - X[i1, 2]) * n2)
        return f * f / (n0 * n0 + n1 * n1 + n2 * n2)
    n0, n1, n2 = _cr(X, i1, i0, i3, i2)
    f = (X[i2, 0] - X[i0, 0]) * n0 + (X[i2, 1] - X[i0, 1]) * n1 + (X[i2, 2] - X[i0, 2]) * n2
    return f * f / (n0 * n0 + n1 * n1 + n2 * n2)


@nb.njit(cache=True)
def sub_sqdist_derivs(sub, i0, i1, i2, i3, X, hess):
    """Squared distance, gradient and Hessian in reduced sub-case ordering."""
    if sub == PP:
        return _sq_pp(X[i0], X[i1], hess)
    if sub == PE:
        return _sq_pe(X[i0], X[i1], X[i2], hess)
    if sub == PT:
        return _sq_pt(X[i0], X[i1], X[i2], X[i3], hess)
    return _sq_ee(X[i0], X[i1], X[i2], X[i3], hess)


@nb.njit(cache=True)
def stencil_sqdist(kind, X):
    sub, i0, i1, i2, i3 = classify(kind, X)
    return sub_sqdist(sub, i0, i1, i2, i3, X)


@nb.njit(cache=True)
def stencil_sqdist_derivs(kind, X, hess):
    """Squared distance with gradient/Hessian scattered to full stencil order."""
    sub, i0, i1, i2, i3 = classify(kind, X)
    s, gr, Hr = sub_sqdist_derivs(sub, i0, i1, i2, i3, X, hess)
    n = STENCIL_SIZE[kind]
    g = np.zeros(3 * n)
    H = np.zeros((3 * n, 3 * n))
    ids = (i0, i1, i2, i3)
    m = STENCIL_SIZE[sub]
    for a in range(m):
        va = ids[a]
        for d in range(3):
            g[3 * va + d] += gr[3 * a + d]
        if hess:
            for b in range(m):
                vb = ids[b]
                for d in range(3):
                    for e in range(3):
                        H[3 * va + d, 3 * vb + e] += Hr[3 * a + d, 3 * b + e]
    return s, g, H, sub, i0, i1, i2, i3


# ---------------------------------------------------------------------------
# Python-facing API
# ---------------------------------------------------------------------------

_LABELS_PE = {0: "vertex-0", 1: "vertex-1"}


def _subcase_label(kind: int, sub, ids) -> str:
    ids = tuple(i for i in ids if i >= 0)
    if kind == PP:
        return "point-point"
    if kind == PE:
        return "interior" if sub == PE else f"vertex-{ids[1] - 1}"
    if kind == PT:
        if sub == PT:
            return "interior"
        if sub == PE:
            return "edge-" + "".join(str(i - 1) for i in sorted(ids[1:]))
        return f"vertex-{ids[1] - 1}"
    # edge-edge
    if sub == EE:
        return "interior-interior"
    if sub == PE:
        p = ids[0]
        side = f"a{p}" if p < 2 else f"b{p - 2}"
        return f"{side}-interior" if p < 2 else f"interior-{side}"
    return f"a{ids[0]}-b{ids[1] - 2}"


@dataclass(frozen=True)
class DistanceResult:
    value: float
    subcase: str
    gradient: np.ndarray
    hessian: np.ndarray
    reduced: tuple = ()


def _stencil(kind: PairKind, coords) -> np.ndarray:
    X = np.zeros((4, 3))
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(c) != kind.n_vertices:
        raise ValueError(f"{kind.name} needs {kind.n_vertices} vertices, got {len(c)}")
    X[: len(c)] = c
    return X


def check_nondegenerate(kind: PairKind, X: np.ndarray) -> None:
    def edge(i, j, name):
        if np.linalg.norm(X[j] - X[i]) <= 0.0:
            raise DegenerateError(f"degenerate {name}: zero-length edge")

    k = kind.value
    if k == PE:
        edge(1, 2, "edge")
    elif k == EE:
        edge(0, 1, "edge a")
        edge(2, 3, "edge b")
    elif k == PT:
        if np.linalg.norm(np.cross(X[2] - X[1], X[3] - X[1])) <= 0.0:
            raise DegenerateError("degenerate triangle: zero area")


def pair_distance(kind: PairKind, coords) -> DistanceResult:
    """Distance between the two primitives of a stencil with derivatives.

    ``coords`` lists the stencil vertices: PP (p, q), PE (p, e0, e1),
    PT (p, t0, t1, t2), EE (a0, a1, b0, b1).
    """
    kind = PairKind(kind)
    X = _stencil(kind, coords)
    check_nondegenerate(kind, X)
    s, g, H, sub, i0, i1, i2, i3 = stencil_sqdist_derivs(kind.value, X, True)
    d = math.sqrt(s)
    n = 3 * kind.n_vertices
    if d > 0.0:
        gd = g / (2.0 * d)
        Hd = H / (2.0 * d) - np.outer(g, g) / (4.0 * d ** 3)
    else:
        gd = np.zeros(n)
        Hd = np.full((n, n), np.nan)
    ids = (i0, i1, i2, i3)
    return DistanceResult(d, _subcase_label(kind.value, sub, ids), gd, Hd, (int(sub),) + ids)


def pair_sqdist(kind: PairKind, coords) -> float:
    kind = PairKind(kind)
    return float(stencil_sqdist(kind.value, _stencil(kind, coords)))


# ---------------------------------------------------------------------------
# primitive distances and intersection predicates
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def orient3d(a, b, c, d):
    return _dot(b - a, _cross(c - a, d - a))


@nb.njit(cache=True)
def segment_sqdist(a0, a1, b0, b1):
    X = np.empty((4, 3))
    X[0] = a0
    X[1] = a1
    X[2] = b0
    X[3] = b1
    return stencil_sqdist(EE, X)


@nb.njit(cache=True)
def point_triangle_sqdist(p, t0, t1, t2):
    X = np.empty((4, 3))
    X[0] = p
    X[1] = t0
    X[2] = t1
    X[3] = t2
    return stencil_sqdist(PT, X)


@nb.njit(cache=True)
def _clip_open_segment_2d(a, b, A, B, C):
    # Cyrus-Beck clip of a + l (b - a), l in [0, 1], against the closed triangle
    area = (B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0])
    sgn = 1.0 if area > 0 else -1.0
    lo, hi = 0.0, 1.0
    P = (A, B, C)
    for k in range(3):
        p, q = P[k], P[(k + 1) % 3]
        # inward normal of edge pq
        nx, ny = -(q[1] - p[1]) * sgn, (q[0] - p[0]) * sgn
        f0 = nx * (a[0] - p[0]) + ny * (a[1] - p[1])
        df = nx * (b[0] - a[0]) + ny * (b[1] - a[1])
        if df == 0.0:
            if f0 < 0.0:
                return False
        elif df > 0.0:
            lo = max(lo, -f0 / df)
        else:
            hi = min(hi, -f0 / df)
        if lo > hi:
            return False
    # reject contact at a segment endpoint only
    if lo == hi and (lo == 0.0 or lo == 1.0):
        return False
    return True


@nb.njit(cache=True)
def segment_triangle_cross(s0, s1, t0, t1, t2):
    """Open segment (s0, s1) meets the closed triangle (t0, t1, t2)."""
    o0 = orient3d(t0, t1, t2, s0)
    o1 = orient3d(t0, t1, t2, s1)
    if o0 == 0.0 and o1 == 0.0:
        n = np.abs(_cross(t1 - t0, t2 - t0))
        ax = 0 if (n[0] >= n[1] and n[0] >= n[2]) else (1 if n[1] >= n[2] else 2)
        i, j = (1, 2) if ax == 0 else ((0, 2) if ax == 1 else (0, 1))
        a = np.array([s0[i], s0[j]])
        b = np.array([s1[i], s1[j]])
        return _clip_open_segment_2d(a, b, np.array([t0[i], t0[j]]),
                                     np.array([t1[i], t1[j]]), np.array([t2[i], t2[j]]))
    if (o0 >= 0.0 and o1 >= 0.0) or (o0 <= 0.0 and o1 <= 0.0):
        return False
    v0 = orient3d(s0, s1, t0, t1)
    v1 = orient3d(s0, s1, t1, t2)
    v2 = orient3d(s0, s1, t2, t0)
    neg = v0 < 0 or v1 < 0 or v2 < 0
    pos = v0 > 0 or v1 > 0 or v2 > 0
    return not (neg and pos)


def segments_intersect(a0, a1, b0, b1, tol: float = 1e-9) -> bool:
    """True iff the minimum segment-segment distance is below ``tol``."""
    f = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
    return bool(math.sqrt(segment_sqdist(f(a0), f(a1), f(b0), f(b1))) < tol)


def segment_triangle_intersect(s0, s1, t0, t1, t2) -> bool:
    f = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
    T = [f(t0), f(t1), f(t2)]
    if np.linalg.norm(np.cross(T[1] - T[0], T[2] - T[0])) <= 0.0:
        raise DegenerateError("degenerate triangle")
    return bool(segment_triangle_cross(f(s0), f(s1), *T))


def primitive_distance(P, Q) -> float:
    """Euclidean distance between two primitives given by vertex coordinates."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) > len(Q):
        P, Q = Q, P
    kinds = {(1, 1): PairKind.POINT_POINT, (1, 2): PairKind.POINT_EDGE,
             (1, 3): PairKind.POINT_TRIANGLE, (2, 2): PairKind.EDGE_EDGE}
    key = (len(P), len(Q))
    if key in kinds:
        return math.sqrt(pair_sqdist(kinds[key], np.vstack([P, Q])))
    # composite primitives: edge-triangle or triangle-triangle
    best = math.inf
    edges_p = [(0, 1)] if len(P) == 2 else [(0, 1), (1, 2), (2, 0)]
    for i, j in edges_p:
        if segment_triangle_cross(P[i], P[j], Q[0], Q[1], Q[2]):
            return 0.0
    if len(P) == 3:
        for i, j in ((0, 1), (1, 2), (2, 0)):
            if segment_triangle_cross(Q[i], Q[j], P[0], P[1], P[2]):
                return 0.0
    for p in P:
        best = min(best, pair_sqdist(PairKind.POINT_TRIANGLE, np.vstack([p, Q])))
    if len(P) == 3:
        for q in Q:
            best = min(best, pair_sqdist(PairKind.POINT_TRIANGLE, np.vstack([q, P])))
    for i, j in edges_p:
        for k, l in ((0, 1), (1, 2), (2, 0)):
            best = min(best, pair_sqdist(PairKind.EDGE_EDGE, np.vstack([P[i], P[j], Q[k], Q[l]])))
    return math.sqrt(best)
