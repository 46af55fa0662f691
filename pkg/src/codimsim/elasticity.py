"""Rod stretch/bend and shell membrane/hinge energies, lumped mass.

All kernels evaluate energy, accumulate a gradient into an ``(n, 3)`` array and
optionally scatter eigen-clamped element Hessians into a :class:`BlockPattern`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .assembly import BlockPattern, scatter_local, stencil_keys
from .mesh import CodimMesh, MeshError

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class RodMaterial:
    youngs_modulus: float
    density: float
    radius: float

    def __post_init__(self):
        for name in ("youngs_modulus", "density", "radius"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def stretch_stiffness(self) -> float:
        return self.youngs_modulus * math.pi * self.radius ** 2

    @property
    def bend_stiffness(self) -> float:
        return self.youngs_modulus * math.pi * self.radius ** 4 / 4.0


@dataclass(frozen=True)
class ShellMaterial:
    youngs_modulus: float
    poisson_ratio: float
    density: float
    thickness: float

    def __post_init__(self):
        if not self.youngs_modulus > 0.0:
            raise ValueError("youngs_modulus must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in [0, 0.5)")
        if not (self.density > 0.0 and self.thickness > 0.0):
            raise ValueError("density and thickness must be positive")

    @property
    def lame(self) -> tuple[float, float]:
        E, nu = self.youngs_modulus, self.poisson_ratio
        return E / (2.0 * (1.0 + nu)), E * nu / (1.0 - nu * nu)

    @property
    def bend_stiffness(self) -> float:
        E, nu, h = self.youngs_modulus, self.poisson_ratio, self.thickness
        return E * h ** 3 / (24.0 * (1.0 - nu * nu))


@nb.njit(cache=True)
def _clamp(H, project):
    if not project:
        return H
    w, V = np.linalg.eigh(H)
    if w[0] >= 0.0:
        return H
    for k in range(len(w)):
        w[k] = max(w[k], 0.0)
    return (V * w) @ V.T


# ---------------------------------------------------------------------------
# rods
# ---------------------------------------------------------------------------

@nb.njit(cache=True)
def _rod_stretch(x, E, rest, ks, want, scale, grad, fmap, indptr, indices, data, project):
    total = 0.0
    ids = np.empty(2, np.int64)
    for k in range(len(E)):
        i = E[k, 0]
        j = E[k, 1]
        e = x[j] - x[i]
        l = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
        lb = rest[k]
        st = l / lb - 1.0
        total += 0.5 * ks * st * st * lb
        if want == 0:
            continue
        n = e / l
        f = ks * st * n
        for c in range(3):
            grad[i, c] -= scale * f[c]
            grad[j, c] += scale * f[c]
        if want >= 2:
            lt = ks * st / l
            if project:
                lt = max(lt, 0.0)
            K = ks / lb * np.outer(n, n) + lt * (np.eye(3) - np.outer(n, n))
            H = np.zeros((6, 6))
            H[:3, :3] = K
            H[3:, 3:] = K
            H[:3, 3:] = -K
            H[3:, :3] = -K
            ids[0] = i
            ids[1] = j
            scatter_local(indptr, indices, data, fmap, ids, 2, H, scale)
    return total


@nb.njit(cache=True)
def _turning(e1, e2, hess):
    # f = |kappa b|^2 = 4 (m - r) / (m + r), m = |e1||e2|, r = e1.e2
    L1 = math.sqrt(np.dot(e1, e1))
    L2 = math.sqrt(np.dot(e2, e2))
    m = L1 * L2
    r = np.dot(e1, e2)
    den = m + r
    f = 4.0 * (m - r) / den
    fm = 8.0 * r / den ** 2
    fr = -8.0 * m / den ** 2
    gm = np.zeros(6)
    gr = np.zeros(6)
    n1 = e1 / L1
    n2 = e2 / L2
    gm[:3] = L2 * n1
    gm[3:] = L1 * n2
    gr[:3] = e2
    gr[3:] = e1
    g = fm * gm + fr * gr
    H = np.zeros((6, 6))
    if hess:
        fmm = -16.0 * r / den ** 3
        frr = 16.0 * m / den ** 3
        fmr = 8.0 * (m - r) / den ** 3
        Hm = np.zeros((6, 6))
        I3 = np.eye(3)
        Hm[:3, :3] = L2 / L1 * (I3 - np.outer(n1, n1))
        Hm[3:, 3:] = L1 / L2 * (I3 - np.outer(n2, n2))
        Hm[:3, 3:] = np.outer(n1, n2)
        Hm[3:, :3] = np.outer(n2, n1)
        Hr = np.zeros((6, 6))
        Hr[:3, 3:] = I3
        Hr[3:, :3] = I3
        H = (fmm * np.outer(gm, gm) + frr * np.outer(gr, gr)
             + fmr * (np.outer(gm, gr) + np.outer(gr, gm)) + fm * Hm + fr * Hr)
    return f, g, H


@nb.njit(cache=True)
def _rod_bend(x, B, lbar, kb, want, scale, grad, fmap, indptr, indices, data, project):
    total = 0.0
    J = np.zeros((6, 9))
    for c in range(3):
        J[c, c] = -1.0
        J[c, 3 + c] = 1.0
        J[3 + c, 3 + c] = -1.0
        J[3 + c, 6 + c] = 1.0
    bad = -1
    for k in range(len(B)):
        e1 = x[B[k, 1]] - x[B[k, 0]]
        e2 = x[B[k, 2]] - x[B[k, 1]]
        L1 = math.sqrt(np.dot(e1, e1))
        L2 = math.sqrt(np.dot(e2, e2))
        if L1 * L2 + np.dot(e1, e2) <= 1e-14 * L1 * L2:
            bad = k
            break
        f, g6, H6 = _turning(e1, e2, want >= 2)
        w = kb / (2.0 * lbar[k])
        total += w * f
        if want == 0:
            continue
        g = J.T @ g6
        for a in range(3):
            for c in range(3):
                grad[B[k, a], c] += scale * w * g[3 * a + c]
        if want >= 2:
            H = _clamp(w * (J.T @ H6 @ J), project)
            scatter_local(indptr, indices, data, fmap, B[k], 3, H, scale)
    return total, bad


def rod_bend_stencils(mesh: CodimMesh):
    """(prev, vertex, next) triples for every degree-2 rod vertex, with Voronoi lengths."""
    n = mesh.n_vertices
    E = mesh.edges
    inc = [[] for _ in range(n)]
    for k, (i, j) in enumerate(E):
        inc[i].append((k, j))
        inc[j].append((k, i))
    rest = mesh.reference_edge_lengths()
    out, lb = [], []
    for v in range(n):
        if len(inc[v]) > 2:
            raise MeshError(f"rod vertex {v} has {len(inc[v])} incident edges")
        if len(inc[v]) == 2:
            (ka, a), (kb, b) = sorted(inc[v])
            out.append((a, v, b))
            lb.append(0.5 * (rest[ka] + rest[kb]))
    return np.array(out, dtype=np.int64).reshape(-1, 3), np.array(lb, dtype=np.float64)


# ---------------------------------------------------------------------------
# shells
# ---------------------------------------------------------------------------

def reference_shape_inverse(X: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Inverse 2x2 reference shape matrices in each triangle's tangent frame."""
    e1 = X[T[:, 1]] - X[T[:, 0]]
    e2 = X[T[:, 2]] - X[T[:, 0]]
    l1 = np.linalg.norm(e1, axis=1)
    c = np.einsum("ij,ij->i", e1, e2) / l1
    s = np.linalg.norm(np.cross(e1, e2), axis=1) / l1
    if np.any(s <= 0.0):
        raise MeshError("degenerate reference triangle")
    Dm = np.zeros((len(T), 2, 2))
    Dm[:, 0, 0] = l1
    Dm[:, 0, 1] = c
    Dm[:, 1, 1] = s
    return np.linalg.inv(Dm)


@nb.njit(cache=True)
def _nh_stress_hessian(F, mu, lam, hess):
    C = F.T @ F
    detC = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
    Ci = np.empty((2, 2))
    Ci[0, 0] = C[1, 1] / detC
    Ci[1, 1] = C[0, 0] / detC
    Ci[0, 1] = -C[0, 1] / detC
    Ci[1, 0] = -C[1, 0] / detC
    lnJ = 0.5 * math.log(detC)
    psi = 0.5 * mu * (C[0, 0] + C[1, 1] - 2.0 - 2.0 * lnJ) + 0.5 * lam * lnJ * lnJ
    G = F @ Ci
    P = mu * F + (lam * lnJ - mu) * G
    HF = np.zeros((6, 6))
    if hess:
        # column c of HF: dP for dF = unit direction (i, col) with index 3 col + i
        for col in range(2):
            for i in range(3):
                dF = np.zeros((3, 2))
                dF[i, col] = 1.0
                dC = dF.T @ F + F.T @ dF
                dG = dF @ Ci - F @ Ci @ dC @ Ci
                dlnJ = G[i, col]
                dP = mu * dF + (lam * lnJ - mu) * dG + lam * dlnJ * G
                for cc in range(2):
                    for ii in range(3):
                        HF[3 * cc + ii, 3 * col + i] = dP[ii, cc]
    return psi, detC, P, HF


@nb.njit(cache=True)
def _membrane(x, T, Bm, area, h, mu, lam, want, scale, grad, fmap, indptr, indices, data, project):
    total = 0.0
    bad = -1
    for k in range(len(T)):
        Ds = np.empty((3, 2))
        Ds[:, 0] = x[T[k, 1]] - x[T[k, 0]]
        Ds[:, 1] = x[T[k, 2]] - x[T[k, 0]]
        B = Bm[k]
        F = Ds @ B
        C = F.T @ F
        if C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0] <= 0.0:
            bad = k
            break
        psi, detC, P, HF = _nh_stress_hessian(F, mu, lam, want >= 2)
        w = h * area[k]
        total += w * psi
        if want == 0:
            continue
        # dvec(F)/dx, vec index 3 col + i, x index 3 vertex + i
        D = np.zeros((6, 9))
        for col in range(2):
            for i in range(3):
                D[3 * col + i, 3 + i] = B[0, col]
                D[3 * col + i, 6 + i] = B[1, col]
                D[3 * col + i, i] = -(B[0, col] + B[1, col])
        vp = np.empty(6)
        for col in range(2):
            for i in range(3):
                vp[3 * col + i] = P[i, col]
        g = D.T @ vp
        for a in range(3):
            for c in range(3):
                grad[T[k, a], c] += scale * w * g[3 * a + c]
        if want >= 2:
            H = _clamp(w * (D.T @ HF @ D), project)
            scatter_local(indptr, indices, data, fmap, T[k], 3, H, scale)
    return total, bad


@nb.njit(cache=True)
def _skew(a):
    S = np.zeros((3, 3))
    S[0, 1] = -a[2]
    S[0, 2] = a[1]
    S[1, 0] = a[2]
    S[1, 2] = -a[0]
    S[2, 0] = -a[1]
    S[2, 1] = a[0]
    return S


@nb.njit(cache=True)
def hinge_angle(X, hess):
    """Signed bend angle phi (0 when flat) of hinge (x0, x1 | x2, x3) with derivatives.

    phi = atan2(y, c), y = -|e| det[e, a, b], c = (e.b)(a.e) - (e.e)(a.b) with
    e = x1 - x0, a = x2 - x0, b = x3 - x0.  The dihedral angle is pi - phi.
    """
    e = X[1] - X[0]
    a = X[2] - X[0]
    b = X[3] - X[0]
    L = math.sqrt(np.dot(e, e))
    n = e / L
    ea = np.dot(e, a)
    eb = np.dot(e, b)
    ab = np.dot(a, b)
    ee = np.dot(e, e)
    c = eb * ea - ee * ab
    D = np.dot(np.cross(e, a), b)
    y = -L * D
    # derivatives in (e, a, b) coordinates
    gc = np.zeros(9)
    gc[:3] = b * ea + a * eb - 2.0 * e * ab
    gc[3:6] = e * eb - b * ee
    gc[6:] = e * ea - a * ee
    gD = np.zeros(9)
    gD[:3] = np.cross(a, b)
    gD[3:6] = np.cross(b, e)
    gD[6:] = np.cross(e, a)
    gL = np.zeros(9)
    gL[:3] = n
    gy = -(D * gL + L * gD)
    r2 = y * y + c * c
    phi = math.atan2(y, c)
    gphi = (c * gy - y * gc) / r2
    J = np.zeros((9, 12))
    for k in range(3):
        J[k, 3 + k] = 1.0
        J[3 + k, 6 + k] = 1.0
        J[6 + k, 9 + k] = 1.0
        J[k, k] = -1.0
        J[3 + k, k] = -1.0
        J[6 + k, k] = -1.0
    Hphi = np.zeros((12, 12))
    if hess:
        I3 = np.eye(3)
        Hc = np.zeros((9, 9))
        Hc[:3, :3] = np.outer(b, a) + np.outer(a, b) - 2.0 * ab * I3
        Hc[:3, 3:6] = np.outer(b, e) + eb * I3 - 2.0 * np.outer(e, b)
        Hc[:3, 6:] = ea * I3 + np.outer(a, e) - 2.0 * np.outer(e, a)
        Hc[3:6, 6:] = np.outer(e, e) - ee * I3
        Hc[3:6, :3] = Hc[:3, 3:6].T
        Hc[6:, :3] = Hc[:3, 6:].T
        Hc[6:, 3:6] = Hc[3:6, 6:].T
        HD = np.zeros((9, 9))
        HD[:3, 3:6] = -_skew(b)
        HD[:3, 6:] = _skew(a)
        HD[3:6, 6:] = -_skew(e)
        HD[3:6, :3] = HD[:3, 3:6].T
        HD[6:, :3] = HD[:3, 6:].T
        HD[6:, 3:6] = HD[3:6, 6:].T
        HL = np.zeros((9, 9))
        HL[:3, :3] = (I3 - np.outer(n, n)) / L
        Hy = -(D * HL + np.outer(gL, gD) + np.outer(gD, gL) + L * HD)
        u = c * gy - y * gc
        H9 = ((c * Hy - y * Hc + np.outer(gy, gc) - np.outer(gc, gy)) / r2
              - np.outer(u, 2.0 * y * gy + 2.0 * c * gc) / (r2 * r2))
        H9 = 0.5 * (H9 + H9.T)
        Hphi = J.T @ H9 @ J
    return phi, J.T @ gphi, Hphi


@nb.njit(cache=True)
def _hinge(x, Hn, phibar, wts, kb, want, scale, grad, fmap, indptr, indices, data, project):
    total = 0.0
    X = np.empty((4, 3))
    for k in range(len(Hn)):
        for j in range(4):
            X[j] = x[Hn[k, j]]
        phi, g, H = hinge_angle(X, want >= 2)
        dphi = phi - phibar[k]
        w = kb * wts[k]
        total += w * dphi * dphi
        if want == 0:
            continue
        for a in range(4):
            for c in range(3):
                grad[Hn[k, a], c] += scale * 2.0 * w * dphi * g[3 * a + c]
        if want >= 2:
            Hl = _clamp(2.0 * w * (np.outer(g, g) + dphi * H), project)
            scatter_local(indptr, indices, data, fmap, Hn[k], 4, Hl, scale)
    return total


def hinge_stencils(mesh: CodimMesh):
    """(x0, x1, x2, x3) for each interior edge with reference weights |e|/h_e and angles."""
    T = mesh.triangles
    X = mesh.reference_positions
    opp: dict = {}
    for t, tri in enumerate(T):
        for k in range(3):
            i, j, o = int(tri[k]), int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3])
            opp.setdefault((min(i, j), max(i, j)), []).append((o, t))
    areas = mesh.reference_triangle_areas()
    hs, w = [], []
    for (i, j), lst in sorted(opp.items()):
        if len(lst) > 2:
            raise MeshError(f"non-manifold edge ({i}, {j})")
        if len(lst) == 2:
            (o1, t1), (o2, t2) = lst
            hs.append((i, j, o1, o2))
            le = float(np.linalg.norm(X[j] - X[i]))
            he = (areas[t1] + areas[t2]) / (3.0 * le)
            w.append(le / he)
    Hn = np.array(hs, dtype=np.int64).reshape(-1, 4)
    phibar = np.array([hinge_angle(X[h], False)[0] for h in Hn], dtype=np.float64)
    return Hn, np.array(w, dtype=np.float64), phibar


def dihedral_angle(X4) -> float:
    """Interior dihedral angle of hinge (x0, x1 | x2, x3) in [0, pi]; pi when flat."""
    return math.pi - abs(hinge_angle(np.asarray(X4, dtype=np.float64), False)[0])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

_EI = np.zeros(0, np.int64)
_ED = np.zeros((0, 3, 3))


class ElasticModel:
    """Precomputed elastic stencils for a mesh and its material."""

    def __init__(self, mesh: CodimMesh, material):
        self.mesh = mesh
        self.material = material
        X = mesh.reference_positions
        if mesh.is_rod:
            if not isinstance(material, RodMaterial):
                raise TypeError("rod meshes need a RodMaterial")
            self.rest = mesh.reference_edge_lengths()
            if np.any(self.rest <= 0.0):
                raise MeshError("zero-length reference edge")
            self.bend, self.lbar = rod_bend_stencils(mesh)
        else:
            if not isinstance(material, ShellMaterial):
                raise TypeError("shell meshes need a ShellMaterial")
            self.Bm = reference_shape_inverse(X, mesh.triangles)
            self.area = mesh.reference_triangle_areas()
            self.hinges, self.hw, self.phibar = hinge_stencils(mesh)

    def stencil_ids(self) -> list[np.ndarray]:
        if self.mesh.is_rod:
            return [self.mesh.edges, self.bend]
        return [self.mesh.triangles, self.hinges]

    def evaluate(self, x, grad=None, scale=1.0, pattern: BlockPattern | None = None, fmap=None,
                 project: bool = True, parts: tuple = ("stretch", "bend")) -> float:
        """Elastic energy; accumulates ``scale``-weighted gradient and Hessian if given."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        want = 0 if grad is None else (2 if pattern is not None else 1)
        g = grad if grad is not None else np.zeros((0, 3))
        if pattern is None:
            fm, ip, ix, dt = _EI, _EI, _EI, _ED
        else:
            fm, ip, ix, dt = fmap, pattern.indptr, pattern.indices, pattern.data
        m = self.material
        total = 0.0
        if self.mesh.is_rod:
            if "stretch" in parts:
                total += _rod_stretch(x, self.mesh.edges, self.rest, m.stretch_stiffness, want,
                                      scale, g, fm, ip, ix, dt, project)
            if "bend" in parts and len(self.bend):
                e, bad = _rod_bend(x, self.bend, self.lbar, m.bend_stiffness, want, scale, g,
                                   fm, ip, ix, dt, project)
                if bad >= 0:
                    raise FloatingPointError(
                        f"antiparallel edges at rod vertex {int(self.bend[bad, 1])}")
                total += e
        else:
            mu, lam = m.lame
            if "stretch" in parts:
                e, bad = _membrane(x, self.mesh.triangles, self.Bm, self.area, m.thickness, mu,
                                   lam, want, scale, g, fm, ip, ix, dt, project)
                if bad >= 0:
                    raise FloatingPointError(f"degenerate triangle {int(bad)} (J <= 0)")
                total += e
            if "bend" in parts and len(self.hinges):
                total += _hinge(x, self.hinges, self.phibar, self.hw, m.bend_stiffness, want,
                                scale, g, fm, ip, ix, dt, project)
        return total


def _api(mesh, mat, x, part, hessian=True, project=False):
    model = ElasticModel(mesh, mat)
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    grad = np.zeros((n, 3))
    if not hessian:
        return model.evaluate(x, grad, parts=(part,)), grad, None
    fmap = np.arange(n, dtype=np.int64)
    ids = model.stencil_ids()[0 if part == "stretch" else 1]
    pat = BlockPattern(stencil_keys(ids, fmap, n), n)
    E = model.evaluate(x, grad, 1.0, pat, fmap, project, parts=(part,))
    return E, grad, pat.tocsr().tocoo()


def rod_stretch(x, mesh: CodimMesh, mat: RodMaterial, hessian: bool = True, project: bool = False):
    """Rod stretching energy with gradient ``(n, 3)`` and Hessian (sparse COO)."""
    return _api(mesh, mat, x, "stretch", hessian, project)


def rod_bend(x, mesh: CodimMesh, mat: RodMaterial, hessian: bool = True, project: bool = False):
    return _api(mesh, mat, x, "bend", hessian, project)


def shell_membrane(x, mesh: CodimMesh, mat: ShellMaterial, hessian: bool = True,
                   project: bool = False):
    return _api(mesh, mat, x, "stretch", hessian, project)


def shell_bend(x, mesh: CodimMesh, mat: ShellMaterial, hessian: bool = True, project: bool = False):
    return _api(mesh, mat, x, "bend", hessian, project)


def lumped_mass(mesh: CodimMesh, mat) -> np.ndarray:
    """Per-vertex mass from half edge lengths (rods) or a third of triangle areas (shells)."""
    m = np.zeros(mesh.n_vertices)
    if mesh.is_rod:
        lin = mat.density * math.pi * mat.radius ** 2
        half = 0.5 * lin * mesh.reference_edge_lengths()
        np.add.at(m, mesh.edges[:, 0], half)
        np.add.at(m, mesh.edges[:, 1], half)
    else:
        third = mat.density * mat.thickness * mesh.reference_triangle_areas() / 3.0
        for k in range(3):
            np.add.at(m, mesh.triangles[:, k], third)
    return m
