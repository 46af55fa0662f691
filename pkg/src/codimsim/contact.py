"""Barrier energies, contact filtering and lagged friction.

Contact stencils are point-triangle (shells) and edge-edge (rods and shells)
pairs of primitives that share no vertex.  Each admissible stencil carries an
activation distance ``a`` and a hard-core offset ``eta``; the pair energy is
``stiffness * b(d - eta, a - eta)`` with the log barrier ``b``.  Filtering
replaces ``(h, eta)`` by ``(d_min, 0)`` for pairs that are intrinsically
closer than the thickness at rest.

Pairs are encoded as int64 keys ``kind << 58 | i << 29 | j`` where ``i, j`` are
primitive indices (vertex/triangle for PT, edge/edge with ``i < j`` for EE).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba as nb
import numpy as np

from .assembly import BlockPattern, scatter_local, stencil_keys
from .mesh import CodimMesh, MeshError, Primitive, geodesic_neighborhoods, hop_neighborhoods
from .proximity import EE, PE, PP, PT, STENCIL_SIZE, classify, sub_sqdist, sub_sqdist_derivs

_SHIFT_KIND = 58
_SHIFT_A = 29
_MASK = (1 << _SHIFT_A) - 1


class InfeasibleError(ValueError):
    """A pair distance is at or below its hard-core offset."""


# ---------------------------------------------------------------------------
# scalar barriers
# ---------------------------------------------------------------------------

def barrier(d: float, a: float) -> float:
    """Log barrier ``-(d - a)^2 ln(d / a)`` supported on ``0 < d < a``."""
    if a <= 0.0:
        raise ValueError(f"activation distance must be positive, got {a}")
    if d <= 0.0:
        raise InfeasibleError(f"distance {d} is not positive")
    if d >= a:
        return 0.0
    return -((d - a) ** 2) * math.log(d / a)


def barrier_biphasic(d: float, a: float, eta: float) -> float:
    """Barrier offset by a hard core of radius ``eta``: ``b(d - eta, a - eta)``."""
    if eta < 0.0 or a <= eta:
        raise ValueError(f"need 0 <= eta < a, got eta={eta}, a={a}")
    if d <= eta:
        raise InfeasibleError(f"distance {d} at or inside the hard core {eta}")
    return barrier(d - eta, a - eta)


@nb.njit(cache=True)
def barrier_derivs(d, a):
    """Barrier value and first two derivatives in ``d`` (zero outside support)."""
    if d >= a:
        return 0.0, 0.0, 0.0
    r = d - a
    ln = math.log(d / a)
    b = -r * r * ln
    b1 = -2.0 * r * ln - r * r / d
    b2 = -2.0 * ln - 4.0 * r / d + r * r / (d * d)
    return b, b1, b2


# ---------------------------------------------------------------------------
# parameters and modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BarrierParams:
    h: float
    eta: float = 0.0
    stiffness: float = 1.0

    def __post_init__(self):
        if not (self.h > 0.0):
            raise ValueError(f"thickness h must be positive, got {self.h}")
        if not (0.0 <= self.eta < self.h):
            raise ValueError(f"need 0 <= eta < h, got eta={self.eta}, h={self.h}")
        if not (self.stiffness > 0.0):
            raise ValueError(f"stiffness must be positive, got {self.stiffness}")

    @property
    def dhat(self) -> float:
        return self.h - self.eta


@dataclass(frozen=True)
class ContactMode:
    tag: str
    radius: int | None = None

    TAGS = ("barrier", "culled", "filtered")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"contact mode must be one of {self.TAGS}, got {self.tag!r}")
        if self.tag == "culled":
            if self.radius is None or int(self.radius) < 1:
                raise ValueError(f"culling radius must be >= 1, got {self.radius}")
        elif self.radius is not None:
            raise ValueError(f"{self.tag} mode takes no radius")

    @classmethod
    def plain(cls) -> "ContactMode":
        return cls("barrier")

    @classmethod
    def culled(cls, radius: int = 11) -> "ContactMode":
        return cls("culled", int(radius))

    @classmethod
    def filtered(cls) -> "ContactMode":
        return cls("filtered")

    @classmethod
    def parse(cls, name: str, radius: int = 11) -> "ContactMode":
        return cls.culled(radius) if name == "culled" else cls(name)


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def encode_keys(kind, a, b) -> np.ndarray:
    kind = np.asarray(kind, dtype=np.int64)
    return (kind << _SHIFT_KIND) | (np.asarray(a, np.int64) << _SHIFT_A) | np.asarray(b, np.int64)


def decode_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _SHIFT_KIND, (keys >> _SHIFT_A) & _MASK, keys & _MASK


@dataclass(frozen=True)
class StencilSet:
    """Contact stencils: kind (PT or EE), four vertex ids and the pair key."""

    kinds: np.ndarray
    verts: np.ndarray
    keys: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)

    @classmethod
    def empty(cls) -> "StencilSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 4), np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_primitive_pairs(cls, mesh: CodimMesh, kind, a, b) -> "StencilSet":
        kind = np.asarray(kind, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        verts = np.empty((len(kind), 4), dtype=np.int64)
        pt = kind == PT
        verts[pt, 0] = a[pt]
        verts[pt, 1:] = mesh.triangles[b[pt]]
        ee = ~pt
        verts[ee, :2] = mesh.edges[a[ee]]
        verts[ee, 2:] = mesh.edges[b[ee]]
        return cls(kind, verts, encode_keys(kind, a, b))

    def subset(self, mask) -> "StencilSet":
        return StencilSet(self.kinds[mask], self.verts[mask], self.keys[mask])


@lru_cache(maxsize=8)
def _primitive_lookup(mesh: CodimMesh):
    edges = {tuple(sorted(map(int, e))): i for i, e in enumerate(mesh.edges)}
    tris = {tuple(sorted(map(int, t))): i for i, t in enumerate(mesh.triangles)}
    return edges, tris


def pair_key(mesh: CodimMesh, p1: Primitive, p2: Primitive) -> int | None:
    """Key of a PT or EE stencil given as primitives; ``None`` for other pairs."""
    if p1.shares_vertex(p2):
        raise MeshError(f"{p1} and {p2} share a vertex; not a contact stencil")
    edges, tris = _primitive_lookup(mesh)
    kinds = {p1.kind, p2.kind}
    if kinds == {"edge"}:
        i, j = edges.get(p1.indices), edges.get(p2.indices)
        if i is None or j is None:
            raise MeshError(f"edge pair {p1}, {p2} not in mesh")
        i, j = min(i, j), max(i, j)
        return int(encode_keys(EE, i, j))
    if kinds == {"vertex", "triangle"}:
        v, t = (p1, p2) if p1.kind == "vertex" else (p2, p1)
        ti = tris.get(t.indices)
        if ti is None:
            raise MeshError(f"triangle {t} not in mesh")
        return int(encode_keys(PT, v.indices[0], ti))
    return None


def key_primitives(mesh: CodimMesh, key: int) -> tuple[Primitive, Primitive]:
    kind, a, b = (int(v) for v in decode_keys(key))
    if kind == PT:
        return Primitive.vertex(a), Primitive.triangle(*mesh.triangles[b])
    return Primitive.edge(*mesh.edges[a]), Primitive.edge(*mesh.edges[b])


def _incidence(elements: np.ndarray, n: int):
    """Vertex -> incident element CSR."""
    k = elements.shape[1] if elements.size else 0
    rows = elements.ravel()
    cols = np.repeat(np.arange(len(elements), dtype=np.int64), k)
    order = np.argsort(rows, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, rows + 1, 1)
    return np.cumsum(ptr), cols[order]


@nb.njit(cache=True)
def _ee_window(E, vptr, vinc, gptr, gnbr, count_only, out_a, out_b):
    ne = len(E)
    mark = np.full(ne, -1, dtype=np.int64)
    m = 0
    for e in range(ne):
        a = E[e, 0]
        b = E[e, 1]
        for side in range(2):
            src = a if side == 0 else b
            for k in range(gptr[src], gptr[src + 1]):
                w = gnbr[k]
                for q in range(vptr[w], vptr[w + 1]):
                    f = vinc[q]
                    if f <= e or mark[f] == e:
                        continue
                    mark[f] = e
                    c = E[f, 0]
                    d = E[f, 1]
                    if c == a or c == b or d == a or d == b:
                        continue
                    if not count_only:
                        out_a[m] = e
                        out_b[m] = f
                    m += 1
    return m


@nb.njit(cache=True)
def _pt_window(T, n, tptr, tinc, gptr, gnbr, count_only, out_a, out_b):
    mark = np.full(len(T), -1, dtype=np.int64)
    m = 0
    for v in range(n):
        for k in range(gptr[v], gptr[v + 1]):
            w = gnbr[k]
            for q in range(tptr[w], tptr[w + 1]):
                t = tinc[q]
                if mark[t] == v:
                    continue
                mark[t] = v
                if T[t, 0] == v or T[t, 1] == v or T[t, 2] == v:
                    continue
                if not count_only:
                    out_a[m] = v
                    out_b[m] = t
                m += 1
    return m


def window_pairs(mesh: CodimMesh, neighborhoods) -> StencilSet:
    """All non-vertex-sharing stencils with some vertex pair inside ``neighborhoods``.

    ``neighborhoods`` is a per-vertex CSR ``(ptr, nbr, ...)`` as produced by
    :func:`geodesic_neighborhoods` or :func:`hop_neighborhoods`.
    """
    gptr, gnbr = neighborhoods[0], neighborhoods[1]
    n = mesh.n_vertices
    E = np.ascontiguousarray(mesh.edges, dtype=np.int64)
    vptr, vinc = _incidence(E, n)
    dummy = np.zeros(0, np.int64)
    m = _ee_window(E, vptr, vinc, gptr, gnbr, True, dummy, dummy)
    ea, eb = np.empty(m, np.int64), np.empty(m, np.int64)
    _ee_window(E, vptr, vinc, gptr, gnbr, False, ea, eb)
    kinds = [np.full(m, EE, np.int64)]
    pa, pb = [ea], [eb]
    if not mesh.is_rod:
        T = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
        tptr, tinc = _incidence(T, n)
        m = _pt_window(T, n, tptr, tinc, gptr, gnbr, True, dummy, dummy)
        va, tb = np.empty(m, np.int64), np.empty(m, np.int64)
        _pt_window(T, n, tptr, tinc, gptr, gnbr, False, va, tb)
        kinds.insert(0, np.full(m, PT, np.int64))
        pa.insert(0, va)
        pb.insert(0, tb)
    st = StencilSet.from_primitive_pairs(mesh, np.concatenate(kinds), np.concatenate(pa),
                                        np.concatenate(pb))
    order = np.argsort(st.keys, kind="stable")
    return st.subset(order)


@nb.njit(cache=True)
def stencil_distances(x, kinds, verts):
    """Current distance of every stencil."""
    n = len(kinds)
    out = np.empty(n)
    X = np.zeros((4, 3))
    for k in range(n):
        for j in range(4):
            X[j] = x[verts[k, j]]
        sb, i0, i1, i2, i3 = classify(kinds[k], X)
        out[k] = math.sqrt(sub_sqdist(sb, i0, i1, i2, i3, X))
    return out


# ---------------------------------------------------------------------------
# filter table
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FilterTable:
    """Pairs that are closer than the thickness at rest, with per-component d_min.

    ``d_min[c]`` is NaN for components without filtered pairs.  Filtered pairs
    use ``(a_eff, eta_eff) = (d_min, 0)``; all other pairs keep ``(h, eta)``.
    """

    mesh: CodimMesh = field(repr=False)
    h: float
    eta: float
    kappa: float
    keys: np.ndarray = field(repr=False)
    d_min: np.ndarray
    n_candidates: int = 0
    candidates_per_component: np.ndarray | None = field(default=None, repr=False)

    @property
    def mode(self) -> str:
        return "biphasic" if self.eta > 0.0 else "single"

    def __len__(self) -> int:
        return len(self.keys)

    def contains(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def component_of(self, verts) -> np.ndarray:
        return self.mesh.component_id[np.asarray(verts)[..., 0]]

    @property
    def filtered_pairs(self) -> dict:
        """``{(prim, prim): (a_eff, eta_eff)}`` for every filtered pair."""
        out = {}
        for key in self.keys:
            p, q = key_primitives(self.mesh, int(key))
            c = self.mesh.component_id[p.indices[0]]
            out[(p, q)] = (float(self.d_min[c]), 0.0)
        return out


def build_filter_table(mesh: CodimMesh, params: BarrierParams, kappa: float = 2.0) -> FilterTable:
    """Find intrinsically close stencils and the per-component minimum rest distance."""
    if kappa < 1.0:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    h = params.h
    nb_ = geodesic_neighborhoods(mesh, kappa * h)
    cand = window_pairs(mesh, nb_)
    X = np.ascontiguousarray(mesh.reference_positions)
    dref = stencil_distances(X, cand.kinds, cand.verts)
    zero = np.flatnonzero(dref <= 0.0)
    if len(zero):
        p, q = key_primitives(mesh, int(cand.keys[zero[0]]))
        raise MeshError(f"reference mesh self-intersects intrinsically: {p} touches {q}")
    keep = dref < h
    comp = mesh.component_id[cand.verts[keep, 0]]
    d_min = np.full(mesh.n_components, np.nan)
    if keep.any():
        vals = np.full(mesh.n_components, np.inf)
        np.minimum.at(vals, comp, dref[keep])
        d_min = np.where(np.isfinite(vals), vals, np.nan)
    per_comp = np.bincount(mesh.component_id[cand.verts[:, 0]], minlength=mesh.n_components)
    return FilterTable(mesh, h, params.eta, float(kappa), cand.keys[keep], d_min, len(cand),
                       per_comp)


def effective_activation(pair, table: FilterTable | None, params: BarrierParams) -> tuple[float, float]:
    """``(a_eff, eta_eff)`` of a primitive pair under the table (or plain barrier if None)."""
    if table is not None:
        key = pair_key(table.mesh, *pair)
        if key is not None and table.contains([key])[0]:
            c = table.mesh.component_id[pair[0].indices[0]]
            return float(table.d_min[c]), 0.0
    return params.h, params.eta


def activation_arrays(st: StencilSet, table: FilterTable | None, params: BarrierParams):
    a = np.full(len(st), params.h)
    eta = np.full(len(st), params.eta)
    if table is not None and len(table) and len(st):
        f = table.contains(st.keys)
        a[f] = table.d_min[table.mesh.component_id[st.verts[f, 0]]]
        eta[f] = 0.0
    return a, eta


# ---------------------------------------------------------------------------
# admissibility (culling)
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _within(ptr, nbr, i, j):
    lo = ptr[i]
    hi = ptr[i + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if nbr[mid] < j:
            lo = mid + 1
        else:
            hi = mid
    return lo < ptr[i + 1] and nbr[lo] == j


@nb.njit(cache=True)
def _culled_mask(kinds, verts, ptr, nbr):
    out = np.ones(len(kinds), dtype=np.bool_)
    for k in range(len(kinds)):
        na = 1 if kinds[k] == PT else 2
        for i in range(na):
            for j in range(na, 4):
                if _within(ptr, nbr, verts[k, i], verts[k, j]):
                    out[k] = False
    return out


class Culler:
    """Parametric-window culling: drop pairs whose vertices are within ``radius`` hops."""

    def __init__(self, mesh: CodimMesh, radius: int):
        self.radius = int(radius)
        self.ptr, self.nbr, _ = hop_neighborhoods(mesh, self.radius)

    def admissible(self, st: StencilSet) -> np.ndarray:
        return _culled_mask(st.kinds, st.verts, self.ptr, self.nbr)


def contact_admissible(pair, mesh: CodimMesh, mode: ContactMode) -> bool:
    """Whether a primitive pair takes part in contact under ``mode``."""
    p, q = pair
    if p.shares_vertex(q):
        return False
    if mode.tag != "culled":
        return True
    # bounded BFS from p's vertices
    adj = mesh.adjacency()
    frontier = set(p.indices)
    seen = set(frontier)
    targets = set(q.indices)
    for _ in range(mode.radius):
        nxt = set()
        for v in frontier:
            nxt.update(int(u) for u in adj.indices[adj.indptr[v]:adj.indptr[v + 1]])
        nxt -= seen
        if nxt & targets:
            return False
        seen |= nxt
        frontier = nxt
    return True


# ---------------------------------------------------------------------------
# energy evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContactSet:
    """Admissible stencils with their fixed activation parameters."""

    stencils: StencilSet
    a_eff: np.ndarray
    eta_eff: np.ndarray

    def __len__(self) -> int:
        return len(self.stencils)

    @classmethod
    def build(cls, st: StencilSet, table: FilterTable | None, params: BarrierParams,
              mode: ContactMode, culler: Culler | None = None) -> "ContactSet":
        if mode.tag == "culled":
            if culler is None:
                raise ValueError("culled mode needs a Culler")
            st = st.subset(culler.admissible(st))
        a, eta = activation_arrays(st, table if mode.tag == "filtered" else None, params)
        return cls(st, a, eta)


@dataclass(frozen=True)
class ActiveSet:
    """Deduplicated active sub-stencils: reduced kind, vertex ids, a, eta, multiplicity."""

    sub: np.ndarray
    ids: np.ndarray
    a: np.ndarray
    eta: np.ndarray
    weight: np.ndarray
    min_distance: float

    def __len__(self) -> int:
        return len(self.sub)


@nb.njit(cache=True)
def _sort2(p, q):
    return (p, q) if p <= q else (q, p)


@nb.njit(cache=True)
def _scan(x, kinds, verts, a_eff, eta_eff):
    n = len(kinds)
    sub = np.empty(n, np.int64)
    ids = np.full((n, 4), -1, np.int64)
    aa = np.empty(n)
    ee = np.empty(n)
    X = np.zeros((4, 3))
    m = 0
    dmin = np.inf
    bad = -1
    for k in range(n):
        for j in range(4):
            X[j] = x[verts[k, j]]
        sb, i0, i1, i2, i3 = classify(kinds[k], X)
        d = math.sqrt(sub_sqdist(sb, i0, i1, i2, i3, X))
        gap = d - eta_eff[k]
        if gap < dmin:
            dmin = gap
        if d <= eta_eff[k]:
            bad = k
            break
        if d >= a_eff[k]:
            continue
        g0 = verts[k, i0]
        g1 = verts[k, i1]
        if sb == PP:
            g0, g1 = _sort2(g0, g1)
            ids[m, 0] = g0
            ids[m, 1] = g1
        elif sb == PE:
            g2 = verts[k, i2]
            g1, g2 = _sort2(g1, g2)
            ids[m, 0] = g0
            ids[m, 1] = g1
            ids[m, 2] = g2
        elif sb == PT:
            t0, t1 = _sort2(verts[k, i1], verts[k, i2])
            t1, t2 = _sort2(t1, verts[k, i3])
            t0, t1 = _sort2(t0, t1)
            ids[m, 0] = g0
            ids[m, 1] = t0
            ids[m, 2] = t1
            ids[m, 3] = t2
        else:
            g0, g1 = _sort2(g0, g1)
            g2, g3 = _sort2(verts[k, i2], verts[k, i3])
            if (g2, g3) < (g0, g1):
                g0, g1, g2, g3 = g2, g3, g0, g1
            ids[m, 0] = g0
            ids[m, 1] = g1
            ids[m, 2] = g2
            ids[m, 3] = g3
        sub[m] = sb
        aa[m] = a_eff[k]
        ee[m] = eta_eff[k]
        m += 1
    return m, sub, ids, aa, ee, dmin, bad


def active_set(x: np.ndarray, cs: ContactSet) -> ActiveSet:
    """Active (d < a_eff) sub-stencils at ``x``, merged when identical."""
    st = cs.stencils
    if len(st) == 0:
        return ActiveSet(np.zeros(0, np.int64), np.zeros((0, 4), np.int64), np.zeros(0),
                         np.zeros(0), np.zeros(0), math.inf)
    m, sub, ids, a, eta, dmin, bad = _scan(x, st.kinds, st.verts, cs.a_eff, cs.eta_eff)
    if bad >= 0:
        raise InfeasibleError(
            f"pair {tuple(int(v) for v in st.verts[bad])} (kind {int(st.kinds[bad])}) at distance "
            f"<= eta_eff = {cs.eta_eff[bad]:.6g}")
    sub, ids, a, eta = sub[:m], ids[:m], a[:m], eta[:m]
    if m:
        order = np.lexsort((eta, a, ids[:, 3], ids[:, 2], ids[:, 1], ids[:, 0], sub))
        sub, ids, a, eta = sub[order], ids[order], a[order], eta[order]
        new = np.ones(m, dtype=bool)
        new[1:] = ((sub[1:] != sub[:-1]) | np.any(ids[1:] != ids[:-1], axis=1)
                   | (a[1:] != a[:-1]) | (eta[1:] != eta[:-1]))
        start = np.flatnonzero(new)
        weight = np.diff(np.append(start, m)).astype(np.float64)
        sub, ids, a, eta = sub[start], ids[start], a[start], eta[start]
    else:
        weight = np.zeros(0)
    return ActiveSet(sub, ids, a, eta, weight, float(dmin))


@nb.njit(cache=True)
def _gather(x, ids, q, m):
    X = np.zeros((4, 3))
    for j in range(m):
        X[j] = x[ids[q, j]]
    return X


@nb.njit(cache=True)
def _pp_projected(r, d2E, dE):
    # PP Hessian [[A, -A], [-A, A]] with A = 4 d2E r r^T + 2 dE I, eigenclamped
    rr = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    ln = 4.0 * d2E * rr + 2.0 * dE
    lt = 2.0 * dE
    ln = max(ln, 0.0)
    lt = max(lt, 0.0)
    A = np.zeros((3, 3))
    for i in range(3):
        A[i, i] = lt
        for j in range(3):
            A[i, j] += (ln - lt) * r[i] * r[j] / rr
    H = np.zeros((6, 6))
    for i in range(3):
        for j in range(3):
            H[i, j] = A[i, j]
            H[3 + i, 3 + j] = A[i, j]
            H[i, 3 + j] = -A[i, j]
            H[3 + i, j] = -A[i, j]
    return H


@nb.njit(cache=True)
def _eval_active(x, sub, ids, a, eta, weight, stiffness, want, scale, grad,
                 fmap, indptr, indices, data, project):
    E = 0.0
    for q in range(len(sub)):
        sb = sub[q]
        m = STENCIL_SIZE[sb]
        X = _gather(x, ids, q, m)
        s, gs, Hs = sub_sqdist_derivs(sb, 0, 1, 2, 3, X, want >= 2)
        d = math.sqrt(s)
        b, b1, b2 = barrier_derivs(d - eta[q], a[q] - eta[q])
        w = weight[q]
        E += w * stiffness * b
        if want == 0:
            continue
        dE = stiffness * b1 / (2.0 * d)
        for j in range(m):
            for c in range(3):
                grad[ids[q, j], c] += scale * w * dE * gs[3 * j + c]
        if want >= 2:
            d2E = stiffness * (b2 - b1 / d) / (4.0 * d * d)
            if sb == PP and project:
                H = _pp_projected(X[0] - X[1], d2E, dE)
            else:
                H = d2E * np.outer(gs, gs) + dE * Hs
                if project:
                    w_, V = np.linalg.eigh(H)
                    if w_[0] < 0.0:
                        for k in range(len(w_)):
                            w_[k] = max(w_[k], 0.0)
                        H = (V * w_) @ V.T
            scatter_local(indptr, indices, data, fmap, ids[q], m, H, scale * w)
    return E


_EMPTY_I = np.zeros(0, np.int64)
_EMPTY_D = np.zeros((0, 3, 3))


def eval_active(x, act: ActiveSet, stiffness: float, grad=None, scale: float = 1.0,
                pattern: BlockPattern | None = None, fmap=None, project: bool = True) -> float:
    """Barrier energy of ``act``; accumulates ``scale``-weighted gradient/Hessian if given."""
    want = 0 if grad is None else (2 if pattern is not None else 1)
    g = grad if grad is not None else np.zeros((0, 3))
    if pattern is None:
        fm, ip, ix, dt = _EMPTY_I, _EMPTY_I, _EMPTY_I, _EMPTY_D
    else:
        fm, ip, ix, dt = fmap, pattern.indptr, pattern.indices, pattern.data
    return _eval_active(x, act.sub, act.ids, act.a, act.eta, act.weight, float(stiffness), want,
                        float(scale), g, fm, ip, ix, dt, project)


@dataclass
class ContactResult:
    energy: float
    gradient: np.ndarray
    hessian: object  # scipy.sparse.coo_matrix (3n x 3n)
    active: ActiveSet


def contact_energy(x, pairs: StencilSet, table: FilterTable | None, params: BarrierParams,
                   mode: ContactMode, culler: Culler | None = None, hessian: bool = True,
                   project: bool = False) -> ContactResult:
    """Total contact energy over admissible ``pairs`` with gradient and Hessian triplets."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    cs = ContactSet.build(pairs, table, params, mode, culler)
    act = active_set(x, cs)
    n = len(x)
    grad = np.zeros((n, 3))
    H = None
    if hessian:
        fmap = np.arange(n, dtype=np.int64)
        pat = BlockPattern(stencil_keys(act.ids, fmap, n), n)
        E = eval_active(x, act, params.stiffness, grad, 1.0, pat, fmap, project)
        H = pat.tocsr()
        H.eliminate_zeros()
        H = H.tocoo()
    else:
        E = eval_active(x, act, params.stiffness, grad)
    return ContactResult(E, grad, H, act)


# ---------------------------------------------------------------------------
# lagged friction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrictionSet:
    """Per-pair lagged normal force, tangent basis and closest-point weights."""

    ids: np.ndarray       # (m, 4) vertex ids, -1 padded
    nv: np.ndarray        # (m,) vertices per pair
    weights: np.ndarray   # (m, 4) relative-displacement weights
    basis: np.ndarray     # (m, 3, 2) orthonormal tangent basis
    normal_force: np.ndarray  # (m,) lagged lambda >= 0
    x_lag: np.ndarray     # positions at the start of the step

    def __len__(self) -> int:
        return len(self.nv)

    @classmethod
    def empty(cls, x) -> "FrictionSet":
        return cls(np.zeros((0, 4), np.int64), np.zeros(0, np.int64), np.zeros((0, 4)),
                   np.zeros((0, 3, 2)), np.zeros(0), np.array(x, dtype=np.float64))


@nb.njit(cache=True)
def _tangent_basis(n):
    k = 0
    if abs(n[1]) < abs(n[k]):
        k = 1
    if abs(n[2]) < abs(n[k]):
        k = 2
    e = np.zeros(3)
    e[k] = 1.0
    t1 = e - (e[0] * n[0] + e[1] * n[1] + e[2] * n[2]) * n
    t1 /= math.sqrt(t1[0] ** 2 + t1[1] ** 2 + t1[2] ** 2)
    t2 = np.array([n[1] * t1[2] - n[2] * t1[1], n[2] * t1[0] - n[0] * t1[2],
                   n[0] * t1[1] - n[1] * t1[0]])
    P = np.empty((3, 2))
    P[:, 0] = t1
    P[:, 1] = t2
    return P


@nb.njit(cache=True)
def _closest_weights(sb, X):
    w = np.zeros(4)
    if sb == PP:
        w[0] = 1.0
        w[1] = -1.0
    elif sb == PE:
        e = X[2] - X[1]
        t = np.dot(X[0] - X[1], e) / np.dot(e, e)
        t = min(max(t, 0.0), 1.0)
        w[0] = 1.0
        w[1] = -(1.0 - t)
        w[2] = -t
    elif sb == PT:
        e1 = X[2] - X[1]
        e2 = X[3] - X[1]
        r = X[0] - X[1]
        a11 = np.dot(e1, e1)
        a12 = np.dot(e1, e2)
        a22 = np.dot(e2, e2)
        r1 = np.dot(r, e1)
        r2 = np.dot(r, e2)
        det = a11 * a22 - a12 * a12
        u = (a22 * r1 - a12 * r2) / det
        v = (a11 * r2 - a12 * r1) / det
        w[0] = 1.0
        w[1] = -(1.0 - u - v)
        w[2] = -u
        w[3] = -v
    else:
        d1 = X[1] - X[0]
        d2 = X[3] - X[2]
        r = X[0] - X[2]
        a = np.dot(d1, d1)
        b = np.dot(d1, d2)
        c = np.dot(d1, r)
        e = np.dot(d2, d2)
        f = np.dot(d2, r)
        den = a * e - b * b
        s = min(max((b * f - c * e) / den, 0.0), 1.0)
        t = min(max((b * s + f) / e, 0.0), 1.0)
        w[0] = 1.0 - s
        w[1] = s
        w[2] = -(1.0 - t)
        w[3] = -t
    return w


@nb.njit(cache=True)
def _friction_setup(x, sub, ids, a, eta, weight, stiffness):
    m = len(sub)
    W = np.zeros((m, 4))
    P = np.zeros((m, 3, 2))
    lam = np.zeros(m)
    nv = np.zeros(m, np.int64)
    for q in range(m):
        sb = sub[q]
        k = STENCIL_SIZE[sb]
        nv[q] = k
        X = _gather(x, ids, q, k)
        w = _closest_weights(sb, X)
        r = np.zeros(3)
        for j in range(k):
            r += w[j] * X[j]
        d = math.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
        W[q] = w
        P[q] = _tangent_basis(r / d)
        s = sub_sqdist(sb, 0, 1, 2, 3, X)
        dd = math.sqrt(s)
        _, b1, _ = barrier_derivs(dd - eta[q], a[q] - eta[q])
        lam[q] = -weight[q] * stiffness * b1
    return W, P, lam, nv


def lag_friction(x, act: ActiveSet, stiffness: float) -> FrictionSet:
    """Freeze normal forces and tangent frames from the active set at ``x``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if len(act) == 0:
        return FrictionSet.empty(x)
    W, P, lam, nv = _friction_setup(x, act.sub, act.ids, act.a, act.eta, act.weight,
                                    float(stiffness))
    return FrictionSet(act.ids.copy(), nv, W, P, lam, x.copy())


@nb.njit(cache=True)
def mollifier(y, eps):
    """f0, f1 = f0', and f1' of the smoothed sliding norm."""
    if y >= eps:
        return y, 1.0, 0.0
    f0 = -y ** 3 / (3.0 * eps * eps) + y * y / eps + eps / 3.0
    f1 = -y * y / (eps * eps) + 2.0 * y / eps
    f2 = -2.0 * y / (eps * eps) + 2.0 / eps
    return f0, f1, f2


@nb.njit(cache=True)
def _eval_friction(x, x0, ids, nv, W, P, lam, mu, eps, want, scale, grad,
                   fmap, indptr, indices, data):
    D = 0.0
    for q in range(len(nv)):
        k = nv[q]
        dx = np.zeros(3)
        for j in range(k):
            dx += W[q, j] * (x[ids[q, j]] - x0[ids[q, j]])
        Pq = P[q]
        u = Pq.T @ dx
        y = math.sqrt(u[0] * u[0] + u[1] * u[1])
        f0, f1, f2 = mollifier(y, eps)
        c = mu * lam[q]
        # offset so that zero slip carries zero potential
        D += c * (f0 - eps / 3.0)
        if want == 0:
            continue
        if y > 0.0:
            fy = f1 / y
        else:
            fy = 2.0 / eps
        gu = c * fy * u
        gx = Pq @ gu
        for j in range(k):
            for cc in range(3):
                grad[ids[q, j], cc] += scale * W[q, j] * gx[cc]
        if want >= 2:
            if y > 0.0:
                uh = u / y
                H2 = c * (f2 * np.outer(uh, uh) + fy * (np.eye(2) - np.outer(uh, uh)))
            else:
                H2 = c * fy * np.eye(2)
            H3 = Pq @ H2 @ Pq.T
            H = np.zeros((3 * k, 3 * k))
            for i in range(k):
                for j in range(k):
                    H[3 * i:3 * i + 3, 3 * j:3 * j + 3] = W[q, i] * W[q, j] * H3
            scatter_local(indptr, indices, data, fmap, ids[q], k, H, scale)
    return D


def eval_friction(x, fs: FrictionSet, mu: float, eps: float, grad=None, scale: float = 1.0,
                  pattern: BlockPattern | None = None, fmap=None) -> float:
    if len(fs) == 0 or mu == 0.0:
        return 0.0
    want = 0 if grad is None else (2 if pattern is not None else 1)
    g = grad if grad is not None else np.zeros((0, 3))
    if pattern is None:
        fm, ip, ix, dt = _EMPTY_I, _EMPTY_I, _EMPTY_I, _EMPTY_D
    else:
        fm, ip, ix, dt = fmap, pattern.indptr, pattern.indices, pattern.data
    return _eval_friction(np.ascontiguousarray(x, dtype=np.float64), fs.x_lag, fs.ids, fs.nv,
                          fs.weights, fs.basis, fs.normal_force, float(mu), float(eps), want,
                          float(scale), g, fm, ip, ix, dt)


def friction_force(x, lagged: FrictionSet, mu: float, epsv: float, dt: float, hessian: bool = True):
    """Lagged smoothed-Coulomb friction: (potential, gradient, Hessian triplets)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    grad = np.zeros((n, 3))
    eps = epsv * dt
    if not hessian:
        return eval_friction(x, lagged, mu, eps, grad), grad, None
    fmap = np.arange(n, dtype=np.int64)
    pat = BlockPattern(stencil_keys(lagged.ids, fmap, n), n)
    D = eval_friction(x, lagged, mu, eps, grad, 1.0, pat, fmap)
    H = pat.tocsr()
    H.eliminate_zeros()
    return D, grad, H.tocoo()
