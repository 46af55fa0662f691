"""Reference/deformed codimensional meshes (polyline rods and triangle shells).

A :class:`CodimMesh` stores the reference (rest) geometry, an initial deformed
configuration, the edge list (rod segments or the shell wireframe), triangles
for shells, and a per-vertex connected-component label.  Intrinsic
("parametric") distances are measured as shortest paths over reference edge
lengths, which is exact arc length for polylines and a graph-geodesic proxy on
triangle meshes.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba as nb
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

ROD = "rod"
SHELL = "shell"


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    """A vertex, edge or triangle given by (sorted) vertex indices."""

    kind: str
    indices: tuple[int, ...]

    _SIZES = {"vertex": 1, "edge": 2, "triangle": 3}

    def __post_init__(self):
        n = self._SIZES.get(self.kind)
        if n is None:
            raise MeshError(f"unknown primitive kind {self.kind!r}")
        if len(self.indices) != n:
            raise MeshError(f"{self.kind} needs {n} indices, got {self.indices}")
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))

    @classmethod
    def vertex(cls, i: int) -> "Primitive":
        return cls("vertex", (i,))

    @classmethod
    def edge(cls, i: int, j: int) -> "Primitive":
        return cls("edge", (i, j))

    @classmethod
    def triangle(cls, i: int, j: int, k: int) -> "Primitive":
        return cls("triangle", (i, j, k))

    def shares_vertex(self, other: "Primitive") -> bool:
        return bool(set(self.indices) & set(other.indices))


def _check_range(arr: np.ndarray, n: int, name: str) -> None:
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise MeshError(f"{name} index out of range")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def triangle_edges(triangles: np.ndarray) -> np.ndarray:
    """Deduplicated, sorted edge list of a triangle soup."""
    if len(triangles) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0).astype(np.int64)


def connected_components(mesh_or_n, edges: np.ndarray | None = None) -> np.ndarray:
    """Edge-connected component labels, numbered by their smallest vertex."""
    if edges is None:
        n, edges = mesh_or_n.n_vertices, mesh_or_n.edges
    else:
        n = int(mesh_or_n)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    g = sp.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    ).tocsr()
    _, raw = csgraph.connected_components(g, directed=False)
    # relabel in order of first appearance (= smallest vertex index)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[raw].astype(np.int64)


@dataclass(frozen=True, eq=False)
class CodimMesh:
    kind: str
    reference_positions: np.ndarray
    deformed_positions: np.ndarray
    edges: np.ndarray
    triangles: np.ndarray
    component_id: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in (ROD, SHELL):
            raise MeshError(f"mesh kind must be 'rod' or 'shell', got {self.kind!r}")
        X = np.asarray(self.reference_positions, dtype=np.float64).reshape(-1, 3)
        x = np.asarray(self.deformed_positions, dtype=np.float64).reshape(-1, 3)
        if X.shape != x.shape:
            raise MeshError("reference and deformed positions differ in length")
        E = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        T = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(X)
        _check_range(E, n, "edge")
        _check_range(T, n, "triangle")
        if len(E) and np.any(E[:, 0] == E[:, 1]):
            raise MeshError("degenerate edge (repeated vertex)")
        if len(T) and np.any((T[:, 0] == T[:, 1]) | (T[:, 1] == T[:, 2]) | (T[:, 0] == T[:, 2])):
            raise MeshError("degenerate triangle (repeated vertex)")
        if self.kind == ROD and len(T):
            raise MeshError("rod meshes carry no triangles")
        if self.kind == SHELL:
            expect = triangle_edges(T)
            if len(E) != len(expect) or np.any(np.sort(E, axis=1) != expect):
                raise MeshError("shell edge list must equal the deduplicated triangle edges")
        comp = np.asarray(self.component_id, dtype=np.int64)
        if comp.shape != (n,) or np.any(comp != connected_components(n, E)):
            raise MeshError("component_id inconsistent with edge connectivity")
        for name, arr in (
            ("reference_positions", X),
            ("deformed_positions", x),
            ("edges", E),
            ("triangles", T),
            ("component_id", comp),
        ):
            object.__setattr__(self, name, _frozen(arr))

    # -- constructors ---------------------------------------------------
    @classmethod
    def rod(cls, positions, edges, deformed=None) -> "CodimMesh":
        X = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        E = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        _check_range(E, len(X), "edge")
        x = X if deformed is None else deformed
        return cls(ROD, X, np.array(x, dtype=np.float64), E, np.zeros((0, 3), np.int64),
                   connected_components(len(X), E))

    @classmethod
    def polyline(cls, positions, closed: bool = False) -> "CodimMesh":
        n = len(positions)
        idx = np.arange(n)
        E = np.stack([idx[:-1], idx[1:]], axis=1)
        if closed:
            E = np.vstack([E, [[n - 1, 0]]])
        return cls.rod(positions, E)

    @classmethod
    def shell(cls, positions, triangles, deformed=None) -> "CodimMesh":
        X = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        T = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        _check_range(T, len(X), "triangle")
        E = triangle_edges(T)
        x = X if deformed is None else deformed
        return cls(SHELL, X, np.array(x, dtype=np.float64), E, T,
                   connected_components(len(X), E))

    def with_deformed(self, x) -> "CodimMesh":
        return CodimMesh(self.kind, self.reference_positions, np.array(x, dtype=np.float64),
                         self.edges, self.triangles, self.component_id)

    # -- basic queries --------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.reference_positions)

    @property
    def n_components(self) -> int:
        return int(self.component_id.max()) + 1 if self.n_vertices else 0

    @property
    def is_rod(self) -> bool:
        return self.kind == ROD

    def reference_edge_lengths(self) -> np.ndarray:
        X = self.reference_positions
        return np.linalg.norm(X[self.edges[:, 1]] - X[self.edges[:, 0]], axis=1)

    def reference_triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.reference_positions, self.triangles)

    def bbox_diagonal(self) -> float:
        X = self.reference_positions
        return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0))) if len(X) else 0.0

    def measure(self, x=None) -> float:
        """Total length (rods) or area (shells) of configuration ``x``."""
        x = self.deformed_positions if x is None else np.asarray(x)
        if self.is_rod:
            return float(np.linalg.norm(x[self.edges[:, 1]] - x[self.edges[:, 0]], axis=1).sum())
        return float(triangle_areas(x, self.triangles).sum())

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric vertex adjacency weighted by reference edge length."""
        n = self.n_vertices
        w = self.reference_edge_lengths()
        i, j = self.edges[:, 0], self.edges[:, 1]
        g = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(n, n))
        return g.tocsr()

    def primitive_vertices(self, p: Primitive) -> tuple[int, ...]:
        for i in p.indices:
            if not 0 <= i < self.n_vertices:
                raise MeshError(f"primitive index {i} out of range")
        return p.indices


def triangle_areas(x: np.ndarray, tris: np.ndarray) -> np.ndarray:
    if len(tris) == 0:
        return np.zeros(0)
    a, b, c = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------------------
# intrinsic distances
# ---------------------------------------------------------------------------

def parametric_distance(mesh: CodimMesh, p1: Primitive, p2: Primitive) -> float:
    """Shortest reference-edge path between any vertex of ``p1`` and of ``p2``.

    Returns 0 for primitives sharing a vertex and ``inf`` across components.
    """
    a = mesh.primitive_vertices(p1)
    b = mesh.primitive_vertices(p2)
    if set(a) & set(b):
        return 0.0
    if mesh.component_id[a[0]] != mesh.component_id[b[0]]:
        return math.inf
    indptr, indices, weights = _csr_arrays(mesh)
    targets = set(b)
    dist = {v: 0.0 for v in a}
    heap = [(0.0, v) for v in a]
    heapq.heapify(heap)
    done = set()
    while heap:
        d, v = heapq.heappop(heap)
        if v in done:
            continue
        if v in targets:
            return d
        done.add(v)
        for k in range(indptr[v], indptr[v + 1]):
            u = int(indices[k])
            nd = d + weights[k]
            if nd < dist.get(u, math.inf):
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    return math.inf


def reference_distance(mesh: CodimMesh, p1: Primitive, p2: Primitive) -> float:
    """Euclidean distance between two primitives on the reference geometry."""
    from .proximity import primitive_distance

    if p1.shares_vertex(p2):
        raise MeshError(f"{p1} and {p2} share a vertex; not a contact stencil")
    X = mesh.reference_positions
    return primitive_distance(X[list(mesh.primitive_vertices(p1))], X[list(mesh.primitive_vertices(p2))])


def _csr_arrays(mesh: CodimMesh):
    g = mesh.adjacency()
    return g.indptr, g.indices, g.data


@nb.njit(cache=True)
def _bounded_dijkstra_all(indptr, indices, weights, n, cutoff):
    # per-source Dijkstra truncated at ``cutoff``; returns CSR (ptr, nbr, dist)
    best = np.full(n, np.inf)
    touched = np.empty(n, dtype=np.int64)
    counts = np.zeros(n + 1, dtype=np.int64)
    out_nbr = []
    out_d = []
    for s in range(n):
        ntouch = 0
        heap = [(0.0, s)]
        best[s] = 0.0
        touched[ntouch] = s
        ntouch += 1
        m = 0
        while len(heap) > 0:
            d, v = heapq.heappop(heap)
            if d > best[v]:
                continue
            out_nbr.append(v)
            out_d.append(d)
            m += 1
            for k in range(indptr[v], indptr[v + 1]):
                u = indices[k]
                nd = d + weights[k]
                if nd < cutoff and nd < best[u]:
                    if best[u] == np.inf:
                        touched[ntouch] = u
                        ntouch += 1
                    best[u] = nd
                    heapq.heappush(heap, (nd, u))
        counts[s + 1] = m
        for k in range(ntouch):
            best[touched[k]] = np.inf
    ptr = np.cumsum(counts)
    nbr = np.empty(len(out_nbr), dtype=np.int64)
    dist = np.empty(len(out_d), dtype=np.float64)
    for k in range(len(out_nbr)):
        nbr[k] = out_nbr[k]
        dist[k] = out_d[k]
    # sort each row by neighbour index for binary search
    for s in range(n):
        a, b = ptr[s], ptr[s + 1]
        order = np.argsort(nbr[a:b])
        nbr[a:b] = nbr[a:b][order]
        dist[a:b] = dist[a:b][order]
    return ptr, nbr, dist


def geodesic_neighborhoods(mesh: CodimMesh, cutoff: float):
    """For every vertex, all vertices with path distance < ``cutoff`` (CSR)."""
    indptr, indices, weights = _csr_arrays(mesh)
    return _bounded_dijkstra_all(indptr.astype(np.int64), indices.astype(np.int64),
                                 weights.astype(np.float64), mesh.n_vertices, float(cutoff))


def hop_neighborhoods(mesh: CodimMesh, radius: int):
    """For every vertex, all vertices within ``radius`` edge hops (CSR)."""
    indptr, indices, _ = _csr_arrays(mesh)
    ones = np.ones(len(indices))
    ptr, nbr, dist = _bounded_dijkstra_all(indptr.astype(np.int64), indices.astype(np.int64),
                                           ones, mesh.n_vertices, float(radius) + 0.5)
    return ptr, nbr, dist


# ---------------------------------------------------------------------------
# Wavefront OBJ
# ---------------------------------------------------------------------------

def load_obj(path) -> CodimMesh:
    """Read ``v``/``l``/``f`` records; ``l`` makes a rod, ``f`` a shell."""
    verts: list[list[float]] = []
    lines: list[list[int]] = []
    faces: list[list[int]] = []

    def idx(tok: str) -> int:
        k = int(tok.split("/")[0])
        return k - 1 if k > 0 else len(verts) + k

    for raw in Path(path).read_text().splitlines():
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "l":
            lines.append([idx(t) for t in tok[1:]])
        elif tok[0] == "f":
            faces.append([idx(t) for t in tok[1:]])
    if lines and faces:
        raise MeshError("OBJ mixes polylines and faces")
    X = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if faces:
        tris = [[f[0], f[k], f[k + 1]] for f in faces for k in range(1, len(f) - 1)]
        return CodimMesh.shell(X, np.array(tris))
    edges = [[ln[k], ln[k + 1]] for ln in lines for k in range(len(ln) - 1)]
    edges = np.unique(np.sort(np.array(edges, dtype=np.int64).reshape(-1, 2), axis=1), axis=0)
    return CodimMesh.rod(X, edges)


def obj_text(mesh: CodimMesh, x=None) -> str:
    x = mesh.deformed_positions if x is None else np.asarray(x)
    out = ["v %.17g %.17g %.17g" % tuple(p) for p in x]
    if mesh.is_rod:
        out += ["l %d %d" % (a + 1, b + 1) for a, b in mesh.edges]
    else:
        out += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.triangles]
    return "\n".join(out) + "\n"


def save_obj(path, mesh: CodimMesh, x=None) -> None:
    Path(path).write_text(obj_text(mesh, x))


def grid_shell(nx: int, ny: int, width: float, height: float,
               center: Sequence[float] = (0.0, 0.0, 0.0)) -> CodimMesh:
    """Regular ``nx`` x ``ny`` quad grid split into 2·nx·ny triangles in the xy-plane."""
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-height / 2, height / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    X = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1) + np.asarray(center)
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            # alternate diagonals to keep the grid symmetric
            if (i + j) % 2 == 0:
                tris += [[a, b, d], [a, d, c]]
            else:
                tris += [[a, b, c], [b, d, c]]
    return CodimMesh.shell(X, np.array(tris))


def concat_rods(meshes: Iterable[CodimMesh]) -> CodimMesh:
    Xs, Es, off = [], [], 0
    for m in meshes:
        Xs.append(m.reference_positions)
        Es.append(m.edges + off)
        off += m.n_vertices
    return CodimMesh.rod(np.vstack(Xs), np.vstack(Es))
