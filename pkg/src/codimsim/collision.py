"""Spatial-hash broad phase, additive CCD step limiting and intersection counts."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .contact import ContactSet, InfeasibleError, StencilSet, decode_keys
from .mesh import CodimMesh
from .proximity import EE, PE, PP, PT, segment_sqdist, segment_triangle_cross, stencil_sqdist

ACCD_SLACK = 0.1
ACCD_MAX_ITERS = 10_000

_H1 = np.int64(73856093)
_H2 = np.int64(19349663)
_H3 = np.int64(83492791)


@nb.njit(cache=True)
def _cell_hash(i, j, k):
    return (i * _H1) ^ (j * _H2) ^ (k * _H3)


@nb.njit(cache=True)
def _boxes(x, p, elems, pad):
    m = len(elems)
    lo = np.empty((m, 3))
    hi = np.empty((m, 3))
    for e in range(m):
        for c in range(3):
            a = np.inf
            b = -np.inf
            for j in range(elems.shape[1]):
                v = elems[e, j]
                u0 = x[v, c]
                u1 = u0 + p[v, c]
                a = min(a, u0, u1)
                b = max(b, u0, u1)
            lo[e, c] = a - pad
            hi[e, c] = b + pad
    return lo, hi


@nb.njit(cache=True)
def _insert(lo, hi, cell):
    m = len(lo)
    count = 0
    for e in range(m):
        n = 1
        for c in range(3):
            n *= int(math.floor(hi[e, c] / cell)) - int(math.floor(lo[e, c] / cell)) + 1
        count += n
    hashes = np.empty(count, dtype=np.int64)
    owner = np.empty(count, dtype=np.int64)
    k = 0
    for e in range(m):
        i0 = int(math.floor(lo[e, 0] / cell))
        i1 = int(math.floor(hi[e, 0] / cell))
        j0 = int(math.floor(lo[e, 1] / cell))
        j1 = int(math.floor(hi[e, 1] / cell))
        k0 = int(math.floor(lo[e, 2] / cell))
        k1 = int(math.floor(hi[e, 2] / cell))
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for kk in range(k0, k1 + 1):
                    hashes[k] = _cell_hash(i, j, kk)
                    owner[k] = e
                    k += 1
    order = np.argsort(hashes, kind="mergesort")
    return hashes[order], owner[order]


@nb.njit(cache=True)
def _overlap(alo, ahi, blo, bhi, a, b):
    for c in range(3):
        if alo[a, c] > bhi[b, c] or blo[b, c] > ahi[a, c]:
            return False
    return True


@nb.njit(cache=True)
def _query(qlo, qhi, qelems, hashes, owner, elo, ehi, eelems, cell, same, count_only, out_a, out_b):
    # pairs (query q, stored e) whose boxes overlap and share no vertex;
    # with ``same`` both sets are the same list and only q < e is reported
    ne = len(elo)
    mark = np.full(ne, -1, dtype=np.int64)
    m = 0
    for q in range(len(qlo)):
        i0 = int(math.floor(qlo[q, 0] / cell))
        i1 = int(math.floor(qhi[q, 0] / cell))
        j0 = int(math.floor(qlo[q, 1] / cell))
        j1 = int(math.floor(qhi[q, 1] / cell))
        k0 = int(math.floor(qlo[q, 2] / cell))
        k1 = int(math.floor(qhi[q, 2] / cell))
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for kk in range(k0, k1 + 1):
                    hsh = _cell_hash(i, j, kk)
                    s = np.searchsorted(hashes, hsh)
                    while s < len(hashes) and hashes[s] == hsh:
                        e = owner[s]
                        s += 1
                        if mark[e] == q or (same and e <= q):
                            continue
                        mark[e] = q
                        if not _overlap(qlo, qhi, elo, ehi, q, e):
                            continue
                        shared = False
                        for u in range(qelems.shape[1]):
                            for w in range(eelems.shape[1]):
                                if qelems[q, u] == eelems[e, w]:
                                    shared = True
                        if shared:
                            continue
                        if not count_only:
                            out_a[m] = q
                            out_b[m] = e
                        m += 1
    return m


def _pairs(qlo, qhi, qel, hashes, owner, elo, ehi, eel, cell, same):
    z = np.zeros(0, np.int64)
    m = _query(qlo, qhi, qel, hashes, owner, elo, ehi, eel, cell, same, True, z, z)
    a = np.empty(m, np.int64)
    b = np.empty(m, np.int64)
    _query(qlo, qhi, qel, hashes, owner, elo, ehi, eel, cell, same, False, a, b)
    return a, b


@dataclass
class SpatialHash:
    """Uniform-grid hash of inflated swept boxes of one primitive list."""

    cell_size: float
    hashes: np.ndarray
    owner: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    elems: np.ndarray

    @classmethod
    def build(cls, x, p, elems, inflation: float, cell_size: float) -> "SpatialHash":
        if not cell_size > 0.0:
            raise ValueError("cell size must be positive")
        elems = np.ascontiguousarray(elems, dtype=np.int64)
        lo, hi = _boxes(x, p, elems, float(inflation))
        hashes, owner = _insert(lo, hi, float(cell_size))
        return cls(float(cell_size), hashes, owner, lo, hi, elems)

    def occupancy(self) -> dict:
        """Cell hash -> list of stored primitive indices (for inspection)."""
        out: dict = {}
        for h, e in zip(self.hashes.tolist(), self.owner.tolist()):
            out.setdefault(h, []).append(e)
        return out

    def query(self, x, p, elems, same: bool = False):
        elems = np.ascontiguousarray(elems, dtype=np.int64)
        lo, hi = _boxes(x, p, elems, 0.0)
        return _pairs(lo, hi, elems, self.hashes, self.owner, self.lo, self.hi, self.elems,
                      self.cell_size, same)


def hash_cell_size(mesh: CodimMesh, inflation: float) -> float:
    el = mesh.reference_edge_lengths()
    return max(float(inflation), float(el.mean()) if len(el) else float(inflation))


def broadphase(mesh: CodimMesh, x, p=None, inflation: float = 0.0) -> StencilSet:
    """Candidate PT/EE stencils whose swept boxes come within ``inflation``.

    Boxes span ``x`` and ``x + p``.  The result is sorted by pair key.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    p = np.zeros_like(x) if p is None else np.ascontiguousarray(p, dtype=np.float64)
    cell = hash_cell_size(mesh, inflation)
    E = mesh.edges
    kinds, pa, pb = [], [], []
    if len(E):
        hs = SpatialHash.build(x, p, E, inflation, cell)
        a, b = hs.query(x, p, E, same=True)
        kinds.append(np.full(len(a), EE, np.int64))
        pa.append(a)
        pb.append(b)
    if not mesh.is_rod and len(mesh.triangles):
        ht = SpatialHash.build(x, p, mesh.triangles, inflation, cell)
        verts = np.arange(mesh.n_vertices, dtype=np.int64)[:, None]
        a, b = ht.query(x, p, verts)
        kinds.insert(0, np.full(len(a), PT, np.int64))
        pa.insert(0, a)
        pb.insert(0, b)
    if not kinds:
        return StencilSet.empty()
    st = StencilSet.from_primitive_pairs(mesh, np.concatenate(kinds), np.concatenate(pa),
                                        np.concatenate(pb))
    return st.subset(np.argsort(st.keys, kind="stable"))


# ---------------------------------------------------------------------------
# additive CCD
# ---------------------------------------------------------------------------

_NSIDE = np.array([1, 1, 1, 2], dtype=np.int64)  # vertices on the first side


@nb.njit(cache=True)
def _accd(kind, X0, P, offset, slack, tmax, max_iters):
    n = 4 if kind >= PT else (3 if kind == PE else 2)
    na = _NSIDE[kind]
    m0 = 0.0
    m1 = 0.0
    m2 = 0.0
    for j in range(n):
        m0 += P[j, 0]
        m1 += P[j, 1]
        m2 += P[j, 2]
    m0 /= n
    m1 /= n
    m2 /= n
    la = 0.0
    lb = 0.0
    for j in range(n):
        nrm = math.sqrt((P[j, 0] - m0) ** 2 + (P[j, 1] - m1) ** 2 + (P[j, 2] - m2) ** 2)
        if j < na:
            la = max(la, nrm)
        else:
            lb = max(lb, nrm)
    lp = la + lb
    d2 = stencil_sqdist(kind, X0)
    d = math.sqrt(d2)
    if d <= offset:
        return -1.0
    if lp == 0.0:
        return tmax
    gap = (d2 - offset * offset) / (d + offset)
    tl = (1.0 - slack) * gap / lp
    if tl > tmax:
        # the first conservative advance already clears the whole interval
        return tmax
    target = slack * gap
    X = X0.copy()
    Pc = np.empty_like(P)
    for j in range(n):
        Pc[j, 0] = P[j, 0] - m0
        Pc[j, 1] = P[j, 1] - m1
        Pc[j, 2] = P[j, 2] - m2
    t = 0.0
    for _ in range(max_iters):
        for j in range(n):
            X[j] += tl * Pc[j]
        d2 = stencil_sqdist(kind, X)
        d = math.sqrt(d2)
        gap = (d2 - offset * offset) / (d + offset)
        if t > 0.0 and gap < target:
            return t
        t += tl
        if t > tmax:
            return tmax
        tl = 0.9 * gap / lp
    return t


@dataclass(frozen=True)
class CcdQuery:
    kind: int
    x_start: np.ndarray
    displacement: np.ndarray
    offset: float = 0.0
    slack: float = ACCD_SLACK


def accd_max_step(q: CcdQuery) -> float:
    """Largest safe step fraction in (0, 1] along ``q.displacement``."""
    if not 0.0 < q.slack < 1.0:
        raise ValueError("slack must lie in (0, 1)")
    X = np.zeros((4, 3))
    P = np.zeros((4, 3))
    x0 = np.asarray(q.x_start, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(q.displacement, dtype=np.float64).reshape(-1, 3)
    X[: len(x0)] = x0
    P[: len(p)] = p
    t = _accd(int(q.kind), X, P, float(q.offset), float(q.slack), 1.0, ACCD_MAX_ITERS)
    if t < 0.0:
        raise InfeasibleError("CCD start distance is at or below the offset")
    return t


@nb.njit(cache=True)
def _scene_accd(x, p, kinds, verts, eta, slack, tmax):
    t = tmax
    X = np.zeros((4, 3))
    P = np.zeros((4, 3))
    for k in range(len(kinds)):
        for j in range(4):
            X[j] = x[verts[k, j]]
            P[j] = p[verts[k, j]]
        tk = _accd(kinds[k], X, P, eta[k], slack, t, ACCD_MAX_ITERS)
        if tk < 0.0:
            return -1.0, k
        if tk < t:
            t = tk
    return t, -1


def contact_set_max_step(x, p, cs: ContactSet, slack: float = ACCD_SLACK) -> float:
    """Minimum ACCD step over the pairs of a contact set, using each pair's eta_eff."""
    st = cs.stencils
    if len(st) == 0:
        return 1.0
    t, bad = _scene_accd(np.ascontiguousarray(x), np.ascontiguousarray(p), st.kinds, st.verts,
                         cs.eta_eff, float(slack), 1.0)
    if t < 0.0:
        raise InfeasibleError(f"pair {tuple(st.verts[bad])} starts at or below its offset")
    return t


def scene_max_step(mesh: CodimMesh, x, p, table, params, mode, culler=None,
                   slack: float = ACCD_SLACK) -> float:
    """Safe step fraction for the whole scene along search direction ``p``."""
    st = broadphase(mesh, x, p, params.h)
    cs = ContactSet.build(st, table, params, mode, culler)
    return contact_set_max_step(x, p, cs, slack)


# ---------------------------------------------------------------------------
# intersection verification
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _rod_touching(x, E, a, b, tol2):
    c = 0
    for k in range(len(a)):
        e = E[a[k]]
        f = E[b[k]]
        if segment_sqdist(x[e[0]], x[e[1]], x[f[0]], x[f[1]]) < tol2:
            c += 1
    return c


@nb.njit(cache=True)
def _edge_tri_crossings(x, E, T, a, b):
    c = 0
    for k in range(len(a)):
        e = E[a[k]]
        t = T[b[k]]
        if segment_triangle_cross(x[e[0]], x[e[1]], x[t[0]], x[t[1]], x[t[2]]):
            c += 1
    return c


def intersection_count(mesh: CodimMesh, x, tol: float = 1e-12) -> int:
    """Rods: touching non-adjacent segment pairs; shells: edge-triangle crossings."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if mesh.is_rod:
        st = broadphase(mesh, x, None, tol)
        _, a, b = decode_keys(st.keys)
        return int(_rod_touching(x, mesh.edges, a, b, tol * tol))
    cell = hash_cell_size(mesh, 0.0)
    z = np.zeros_like(x)
    ht = SpatialHash.build(x, z, mesh.triangles, 0.0, cell)
    a, b = ht.query(x, z, mesh.edges)
    return int(_edge_tri_crossings(x, mesh.edges, mesh.triangles, a, b))


@nb.njit(cache=True)
def _coplanar_roots(X, P):
    # roots in [0, 1] of det[x1 - x0, x2 - x0, x3 - x0](t) with x_i(t) = X_i + t P_i
    f = np.empty(4)
    for s in range(4):
        t = s / 3.0
        a = X[1] + t * P[1] - X[0] - t * P[0]
        b = X[2] + t * P[2] - X[0] - t * P[0]
        c = X[3] + t * P[3] - X[0] - t * P[0]
        f[s] = (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]))
    # Newton-form interpolation on nodes 0, 1/3, 2/3, 1 -> power basis
    h = 1.0 / 3.0
    d1 = (f[1] - f[0]) / h
    d2 = (f[2] - f[1]) / h
    d3 = (f[3] - f[2]) / h
    e1 = (d2 - d1) / (2 * h)
    e2 = (d3 - d2) / (2 * h)
    g = (e2 - e1) / (3 * h)
    # f(t) = f0 + d1 t + e1 t (t - h) + g t (t - h)(t - 2h)
    c3 = g
    c2 = e1 - 3 * h * g
    c1 = d1 - h * e1 + 2 * h * h * g
    c0 = f[0]
    scale = max(abs(c0), abs(c1), abs(c2), abs(c3))
    out = np.empty(3)
    m = 0
    if scale == 0.0:
        return out[:0]
    if abs(c3) > 1e-12 * scale:
        r = np.roots(np.array([c3, c2, c1, c0], dtype=np.complex128))
    elif abs(c2) > 1e-12 * scale:
        r = np.roots(np.array([c2, c1, c0], dtype=np.complex128))
    elif abs(c1) > 1e-12 * scale:
        r = np.array([complex(-c0 / c1, 0.0)])
    else:
        return out[:0]
    for z in r:
        if abs(z.imag) <= 1e-9 and -1e-9 <= z.real <= 1.0 + 1e-9:
            out[m] = min(max(z.real, 0.0), 1.0)
            m += 1
    return out[:m]


@nb.njit(cache=True)
def _swept_events(x0, p, kinds, verts, rel_tol):
    count = 0
    X = np.zeros((4, 3))
    P = np.zeros((4, 3))
    for k in range(len(kinds)):
        for j in range(4):
            X[j] = x0[verts[k, j]]
            P[j] = p[verts[k, j]]
        roots = _coplanar_roots(X, P)
        L = 0.0
        for j in range(4):
            for i in range(j):
                L = max(L, math.sqrt(((X[i] - X[j]) ** 2).sum()))
        tol2 = (rel_tol * L) ** 2
        for t in roots:
            Y = X + t * P
            if kinds[k] == EE:
                s = segment_sqdist(Y[0], Y[1], Y[2], Y[3])
            else:
                s = stencil_sqdist(PT, Y)
            if s <= tol2:
                count += 1
                break
    return count


def swept_crossings(mesh: CodimMesh, x0, x1, rel_tol: float = 1e-9) -> int:
    """Number of stencils that pass through each other along the linear path x0 -> x1."""
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    p = np.ascontiguousarray(x1, dtype=np.float64) - x0
    st = broadphase(mesh, x0, p, 0.0)
    if len(st) == 0:
        return 0
    return int(_swept_events(x0, p, st.kinds, st.verts, float(rel_tol)))


# ---------------------------------------------------------------------------
# brute force oracles
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _all_ee(E):
    n = len(E)
    out_a = []
    out_b = []
    for i in range(n):
        for j in range(i + 1, n):
            if E[i, 0] == E[j, 0] or E[i, 0] == E[j, 1] or E[i, 1] == E[j, 0] or E[i, 1] == E[j, 1]:
                continue
            out_a.append(i)
            out_b.append(j)
    return np.array(out_a, dtype=np.int64), np.array(out_b, dtype=np.int64)


@nb.njit(cache=True)
def _all_pt(T, n):
    out_a = []
    out_b = []
    for v in range(n):
        for t in range(len(T)):
            if T[t, 0] == v or T[t, 1] == v or T[t, 2] == v:
                continue
            out_a.append(v)
            out_b.append(t)
    return np.array(out_a, dtype=np.int64), np.array(out_b, dtype=np.int64)


def all_stencils(mesh: CodimMesh) -> StencilSet:
    """Every non-vertex-sharing PT/EE stencil (quadratic; for oracles and small meshes)."""
    ea, eb = _all_ee(np.ascontiguousarray(mesh.edges))
    kinds, pa, pb = [np.full(len(ea), EE, np.int64)], [ea], [eb]
    if not mesh.is_rod:
        va, tb = _all_pt(np.ascontiguousarray(mesh.triangles), mesh.n_vertices)
        kinds.insert(0, np.full(len(va), PT, np.int64))
        pa.insert(0, va)
        pb.insert(0, tb)
    st = StencilSet.from_primitive_pairs(mesh, np.concatenate(kinds), np.concatenate(pa),
                                        np.concatenate(pb))
    return st.subset(np.argsort(st.keys, kind="stable"))
