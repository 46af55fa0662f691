"""Declarative scenes: JSON config, procedural builders and scripted boundary motions."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .collision import broadphase
from .contact import (BarrierParams, ContactMode, FilterTable, active_set, build_filter_table,
                      ContactSet)
from .elasticity import ElasticModel, GRAVITY, RodMaterial, ShellMaterial, lumped_mass
from .mesh import CodimMesh, MeshError, load_obj
from .solver import BoundaryConditions, Scene, SimState, SolverParams


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _resample(P: np.ndarray, segments: int) -> np.ndarray:
    """Resample a dense polyline at ``segments`` equal arc-length steps."""
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    u = np.linspace(0.0, s[-1], segments + 1)
    return np.stack([np.interp(u, s, P[:, k]) for k in range(3)], axis=1)


def straight_yarn(length: float, segments: int, direction=(1.0, 0.0, 0.0)) -> CodimMesh:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    s = np.linspace(-0.5 * length, 0.5 * length, segments + 1)
    return CodimMesh.polyline(s[:, None] * d[None, :])


def two_yarns(length: float, segments: int, separation: float) -> CodimMesh:
    """Two parallel straight yarns along x, ``separation`` apart in y."""
    s = np.linspace(-0.5 * length, 0.5 * length, segments + 1)
    a = np.stack([s, np.full_like(s, -0.5 * separation), np.zeros_like(s)], axis=1)
    b = a + np.array([0.0, separation, 0.0])
    n = segments + 1
    edges = np.array([[i, i + 1] for i in range(segments)] + [[n + i, n + i + 1] for i in range(segments)])
    return CodimMesh.rod(np.vstack([a, b]), edges)


def _trefoil(t):
    return np.stack([(2.0 + np.cos(3 * t)) * np.cos(2 * t),
                     (2.0 + np.cos(3 * t)) * np.sin(2 * t),
                     np.sin(3 * t)], axis=-1)


def overhand_knot(segments: int, size: float = 3e-3, tail: float = 2e-3, cut: float = 0.25,
                  dense: int = 4000) -> CodimMesh:
    """Loose open overhand knot: a torus trefoil cut at an outer lobe, with two tails.

    ``size`` is the width of the knotted body.  The tails leave the cut radially,
    then turn toward -y and +y so that pulling the ends apart along y tightens it.
    """
    s = size / 6.0
    t = np.linspace(cut, 2.0 * math.pi - cut, dense)
    body = s * _trefoil(t)
    out = np.array([1.0, 0.0, 0.0])
    side = np.array([0.0, 1.0, 0.0])

    def tail_curve(p0, sign):
        p1 = p0 + 0.5 * tail * out
        p2 = p1 - sign * tail * side
        u = np.linspace(0.0, 1.0, dense // 4)[:, None]
        return (1 - u) ** 2 * p0 + 2 * u * (1 - u) * p1 + u * u * p2

    head = tail_curve(body[0], -1.0)[::-1]
    foot = tail_curve(body[-1], 1.0)
    P = np.vstack([head[:-1], body, foot[1:]])
    return CodimMesh.polyline(_resample(P, segments))


def helix_stack(segments: int, radius: float, pitch: float, turns: float,
                lead: float = 0.0) -> CodimMesh:
    """Helix about z with straight leads of length ``lead`` along -z/+z at both ends."""
    t = np.linspace(0.0, 2.0 * math.pi * turns, 4000)
    P = np.stack([radius * np.cos(t), radius * np.sin(t), pitch * t / (2 * math.pi)], axis=1)
    if lead > 0.0:
        a = P[0] - np.array([0.0, 0.0, lead])
        b = P[-1] + np.array([0.0, 0.0, lead])
        P = np.vstack([np.linspace(a, P[0], 200)[:-1], P, np.linspace(P[-1], b, 200)[1:]])
    return CodimMesh.polyline(_resample(P, segments))


def loop(segments: int = 18, standing: float = 1.2e-3, radius: float = 0.55e-3,
         pitch: float = 0.55e-3, tail: float = 1e-3, lead: float = 1e-3,
         dense: int = 4000) -> CodimMesh:
    """A yarn that runs out along a standing part, doubles back and wraps once around it.

    The standing part runs along x over ``[-standing/2 - lead, standing/2]``.  From its
    +x end the yarn returns above it at height ``radius`` to the middle, makes one
    helical turn of ``radius`` about the x-axis advancing ``pitch`` toward -x, and
    leaves along +z as a tail of length ``tail``.  Pinning the standing part and
    pulling the tail along +z drags the turn against the standing part.
    """
    a = 0.5 * standing
    n4 = dense // 4
    A = np.stack([np.linspace(-a - lead, a, n4), np.zeros(n4), np.zeros(n4)], axis=1)
    start = np.array([0.5 * pitch, 0.0, radius])
    ang = np.linspace(-0.5 * math.pi, 0.5 * math.pi, n4)
    bend = np.stack([a + 0.5 * radius * np.cos(ang), np.zeros(n4), 0.5 * radius * (1 + np.sin(ang))], axis=1)
    back = np.linspace(bend[-1], start, n4)
    th = np.linspace(0.0, 2.0 * math.pi, dense)
    turn = np.stack([start[0] - pitch * th / (2 * math.pi), radius * np.sin(th), radius * np.cos(th)],
                    axis=1)
    up = np.linspace(turn[-1], turn[-1] + np.array([0.0, 0.0, tail]), n4)
    P = np.vstack([A, bend[1:], back[1:], turn[1:], up[1:]])
    return CodimMesh.polyline(_resample(P, segments))


def cloth_grid(width: float, height: float, nx: int, ny: int, z: float = 0.0) -> CodimMesh:
    from .mesh import grid_shell

    return grid_shell(nx, ny, width, height, center=(0.0, 0.0, z))


def graded_grid(width: float, n: int, ratio: float = 4.0) -> CodimMesh:
    """Square grid whose spacing is ``ratio`` times finer at the center than at the border."""
    if n < 2 or ratio < 1.0:
        raise ScenarioError("graded_grid needs n >= 2 and ratio >= 1")
    u = np.linspace(-1.0, 1.0, n + 1)
    # spacing ~ 1 + (ratio - 1) u^2, integrated and normalized to [-1, 1]
    c = ratio - 1.0
    g = u + c * u ** 3 / 3.0
    xs = 0.5 * width * g / g[-1]
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    X = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    tris = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c_, d = a + 1, a + n + 1, a + n + 2
            if (i + j) % 2 == 0:
                tris += [[a, b, d], [a, d, c_]]
            else:
                tris += [[a, b, c_], [b, d, c_]]
    return CodimMesh.shell(X, np.array(tris))


BUILDERS: dict[str, Callable[..., CodimMesh]] = {
    "straight_yarn": straight_yarn,
    "two_yarns": two_yarns,
    "overhand_knot": overhand_knot,
    "loop": loop,
    "helix_stack": helix_stack,
    "cloth_grid": cloth_grid,
    "graded_grid": graded_grid,
}


# ---------------------------------------------------------------------------
# config records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...] | None = None
    box_min: tuple[float, float, float] | None = None
    box_max: tuple[float, float, float] | None = None

    def resolve(self, X: np.ndarray) -> np.ndarray:
        n = len(X)
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64)
            if np.any(idx >= n) or np.any(idx < -n):
                raise ScenarioError(f"selection index out of range for {n} vertices")
            sel = np.unique(np.where(idx < 0, idx + n, idx))
        else:
            lo, hi = np.asarray(self.box_min), np.asarray(self.box_max)
            sel = np.flatnonzero(np.all((X >= lo) & (X <= hi), axis=1))
        if len(sel) == 0:
            raise ScenarioError("motion selects no vertices")
        return sel


@dataclass(frozen=True)
class ScriptedMotion:
    """One boundary prescription; selected vertices are held outside the window."""

    kind: str
    select: Selection
    t_start: float = 0.0
    t_end: float = math.inf
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_point: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)
    angular_velocity: float = 0.0
    select_b: Selection | None = None

    KINDS = ("pin", "translate", "twist", "stretch_pull")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ScenarioError(f"unknown motion kind {self.kind!r}")
        if self.t_start < 0.0 or self.t_end < self.t_start:
            raise ScenarioError("motion window must satisfy 0 <= t_start <= t_end")
        if self.kind == "stretch_pull" and self.select_b is None:
            raise ScenarioError("stretch_pull needs a second selection")
        if self.kind == "twist" and not np.linalg.norm(self.axis_dir) > 0.0:
            raise ScenarioError("twist axis direction must be nonzero")

    def elapsed(self, t: float) -> float:
        return min(max(t, self.t_start), self.t_end) - self.t_start

    def groups(self, X: np.ndarray) -> list[tuple[np.ndarray, "ScriptedMotion", float]]:
        """``(vertices, motion, sign)`` groups; stretch_pull splits into two."""
        a = self.select.resolve(X)
        if self.kind != "stretch_pull":
            return [(a, self, 1.0)]
        b = self.select_b.resolve(X)
        if np.intersect1d(a, b).size:
            raise ScenarioError("stretch_pull vertex sets overlap")
        return [(a, self, 1.0), (b, self, -1.0)]

    def transform(self, P: np.ndarray, t: float, sign: float = 1.0) -> np.ndarray:
        tau = self.elapsed(t)
        if self.kind == "pin" or tau == 0.0:
            return P
        if self.kind in ("translate", "stretch_pull"):
            return P + sign * tau * np.asarray(self.velocity)
        k = np.asarray(self.axis_dir, dtype=np.float64)
        k = k / np.linalg.norm(k)
        c = np.asarray(self.axis_point)
        th = self.angular_velocity * tau
        r = P - c
        cos, sin = math.cos(th), math.sin(th)
        rot = r * cos + np.cross(k, r) * sin + np.outer(r @ k, k) * (1.0 - cos)
        return c + rot

    def same_prescription(self, other: "ScriptedMotion") -> bool:
        if self.kind == "pin" and other.kind == "pin":
            return True
        return self == other


def _overlap(m1: ScriptedMotion, m2: ScriptedMotion) -> bool:
    return max(m1.t_start, m2.t_start) < min(m1.t_end, m2.t_end) or (
        m1.t_start == m2.t_start and (m1.t_end == m1.t_start or m2.t_end == m2.t_start))


@dataclass(frozen=True)
class MotionPlan:
    """Resolved motions: fixed vertex set and closed-form trajectories."""

    fixed: np.ndarray
    reference: np.ndarray
    chains: tuple  # per fixed vertex position: list of (motion, sign) sorted by t_start

    def positions(self, t: float) -> np.ndarray:
        out = self.reference.copy()
        for rows, chain in self.chains:
            P = out[rows]
            for motion, sign in chain:
                P = motion.transform(P, t, sign)
            out[rows] = P
        return out


def plan_motions(X: np.ndarray, motions) -> MotionPlan:
    per_vertex: dict[int, list[tuple[ScriptedMotion, float]]] = {}
    for m in motions:
        for verts, mm, sign in m.groups(X):
            for v in verts.tolist():
                per_vertex.setdefault(v, []).append((mm, sign))
    fixed = np.array(sorted(per_vertex), dtype=np.int64)
    groups: dict[tuple, list[int]] = {}
    for row, v in enumerate(fixed.tolist()):
        chain = sorted(per_vertex[v], key=lambda ms: ms[0].t_start)
        for i in range(len(chain)):
            for j in range(i + 1, len(chain)):
                a, b = chain[i], chain[j]
                if _overlap(a[0], b[0]) and not (a[0].same_prescription(b[0]) and a[1] == b[1]):
                    raise ScenarioError(f"conflicting motions prescribe vertex {v} over "
                                        f"overlapping windows")
        key = tuple((id(m), s) for m, s in chain)
        groups.setdefault(key, []).append(row)
        per_vertex[v] = chain
    chains = []
    for key, rows in groups.items():
        chain = per_vertex[int(fixed[rows[0]])]
        chains.append((np.asarray(rows, dtype=np.int64), tuple(chain)))
    return MotionPlan(fixed, X[fixed].copy(), tuple(chains))


def apply_motions(state: SimState | np.ndarray, motions, t: float) -> tuple[np.ndarray, np.ndarray]:
    """``(fixed vertex ids, prescribed positions at time t)`` from reference positions.

    ``state`` may be a :class:`SimState` whose ``x`` is taken as the reference, or
    the reference positions themselves.
    """
    X = state.x if isinstance(state, SimState) else np.asarray(state, dtype=np.float64)
    plan = plan_motions(X, motions)
    return plan.fixed, plan.positions(t)


@dataclass(frozen=True)
class GeometrySpec:
    builder: str | None = None
    params: dict = field(default_factory=dict)
    obj: str | None = None

    def build(self, base_dir: Path | None = None) -> CodimMesh:
        if self.obj is not None:
            p = Path(self.obj)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            return load_obj(p)
        fn = BUILDERS.get(self.builder)
        if fn is None:
            raise ScenarioError(f"unknown builder {self.builder!r}; known: {sorted(BUILDERS)}")
        try:
            return fn(**self.params)
        except TypeError as exc:
            raise ScenarioError(f"bad parameters for builder {self.builder!r}: {exc}") from None


@dataclass(frozen=True)
class EtaPolicy:
    kind: str = "fraction_of_min"
    value: float = 0.9

    def resolve(self, h: float, d_min: np.ndarray) -> float:
        if self.kind == "fraction_of_h":
            eta = self.value * h
        elif self.kind == "fraction_of_min":
            finite = d_min[np.isfinite(d_min)]
            eta = self.value * min(h, float(finite.min()) if finite.size else h)
        elif self.kind == "absolute":
            eta = float(self.value)
        else:
            raise ScenarioError(f"unknown eta policy {self.kind!r}")
        if not 0.0 <= eta < h:
            raise ScenarioError(f"resolved eta {eta:g} outside [0, h = {h:g})")
        return eta


@dataclass(frozen=True)
class ContactSpec:
    mode: str = "filtered"
    cull_radius: int = 11
    stiffness: float = 1.0
    kappa: float = 2.0

    def contact_mode(self) -> ContactMode:
        try:
            return ContactMode.parse(self.mode, self.cull_radius)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: GeometrySpec
    material: dict
    thickness: float
    eta_policy: EtaPolicy = field(default_factory=EtaPolicy)
    contact: ContactSpec = field(default_factory=ContactSpec)
    gravity: tuple[float, float, float] | None = None
    motions: tuple[ScriptedMotion, ...] = ()
    solver: SolverParams = field(default_factory=SolverParams)
    frames: int = 50
    seed: int = 0
    name: str = "scenario"
    base_dir: str | None = None

    def __post_init__(self):
        if not self.thickness > 0.0:
            raise ScenarioError("thickness must be positive")
        if self.frames < 1:
            raise ScenarioError("frames must be >= 1")

    def with_mode(self, mode: str, cull_radius: int | None = None) -> "ScenarioConfig":
        r = self.contact.cull_radius if cull_radius is None else cull_radius
        return replace(self, contact=replace(self.contact, mode=mode, cull_radius=r))


# ---------------------------------------------------------------------------
# strict JSON loading
# ---------------------------------------------------------------------------

def _strict(d: Any, allowed: set, where: str) -> dict:
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")
    return d


def _vec3(v, where):
    if not (isinstance(v, (list, tuple)) and len(v) == 3):
        raise ScenarioError(f"{where}: expected a 3-vector")
    return tuple(float(c) for c in v)


def _selection(d, where) -> Selection:
    d = _strict(d, {"indices", "box"}, where)
    if ("indices" in d) == ("box" in d):
        raise ScenarioError(f"{where}: give exactly one of 'indices' or 'box'")
    if "indices" in d:
        return Selection(indices=tuple(int(i) for i in d["indices"]))
    b = _strict(d["box"], {"min", "max"}, where + ".box")
    return Selection(box_min=_vec3(b["min"], where), box_max=_vec3(b["max"], where))


def _motion(d, where) -> ScriptedMotion:
    d = _strict(d, {"kind", "select", "select_b", "window", "velocity", "axis_point",
                    "axis_dir", "angular_velocity"}, where)
    kw: dict[str, Any] = {"kind": d.get("kind"), "select": _selection(d.get("select"), where + ".select")}
    if "select_b" in d:
        kw["select_b"] = _selection(d["select_b"], where + ".select_b")
    if "window" in d:
        w = d["window"]
        kw["t_start"] = float(w[0])
        kw["t_end"] = math.inf if w[1] is None else float(w[1])
    for k in ("velocity", "axis_point", "axis_dir"):
        if k in d:
            kw[k] = _vec3(d[k], f"{where}.{k}")
    if "angular_velocity" in d:
        kw["angular_velocity"] = float(d["angular_velocity"])
    return ScriptedMotion(**kw)


_MATERIAL_KEYS = {"rod": {"kind", "youngs_modulus", "density", "radius"},
                  "shell": {"kind", "youngs_modulus", "poisson_ratio", "density", "thickness"}}


def config_from_dict(d: dict, base_dir: str | None = None) -> ScenarioConfig:
    d = _strict(d, {"name", "geometry", "material", "thickness", "eta_policy", "contact",
                    "gravity", "motions", "solver", "frames", "seed"}, "scenario")
    for k in ("geometry", "material", "thickness"):
        if k not in d:
            raise ScenarioError(f"scenario: missing required key {k!r}")
    g = _strict(d["geometry"], {"obj", "builder", "params"}, "geometry")
    if ("obj" in g) == ("builder" in g):
        raise ScenarioError("geometry: give exactly one of 'obj' or 'builder'")
    geom = GeometrySpec(builder=g.get("builder"), params=dict(g.get("params", {})), obj=g.get("obj"))
    mat = d["material"]
    kind = mat.get("kind") if isinstance(mat, dict) else None
    if kind not in _MATERIAL_KEYS:
        raise ScenarioError("material.kind must be 'rod' or 'shell'")
    _strict(mat, _MATERIAL_KEYS[kind], "material")
    kw: dict[str, Any] = {"geometry": geom, "material": dict(mat), "thickness": float(d["thickness"]),
                          "base_dir": base_dir}
    if "eta_policy" in d:
        e = _strict(d["eta_policy"], {"fraction_of_h", "fraction_of_min", "absolute"}, "eta_policy")
        if len(e) != 1:
            raise ScenarioError("eta_policy: give exactly one policy")
        (k, v), = e.items()
        kw["eta_policy"] = EtaPolicy(k, float(v))
    if "contact" in d:
        c = _strict(d["contact"], {"mode", "cull_radius", "stiffness", "kappa"}, "contact")
        kw["contact"] = ContactSpec(**c)
    if "gravity" in d:
        gr = _strict(d["gravity"], {"enabled", "vector"}, "gravity")
        if gr.get("enabled", True):
            kw["gravity"] = _vec3(gr.get("vector", GRAVITY.tolist()), "gravity.vector")
    if "motions" in d:
        kw["motions"] = tuple(_motion(m, f"motions[{i}]") for i, m in enumerate(d["motions"]))
    if "solver" in d:
        names = {f.name for f in fields(SolverParams)}
        s = _strict(d["solver"], names, "solver")
        try:
            kw["solver"] = SolverParams(**s)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"solver: {exc}") from None
    for k in ("frames", "seed"):
        if k in d:
            kw[k] = int(d[k])
    if "name" in d:
        kw["name"] = str(d["name"])
    return ScenarioConfig(**kw)


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {p}: {exc}") from None
    return config_from_dict(data, base_dir=str(p.parent))


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SceneBundle:
    config: ScenarioConfig
    mesh: CodimMesh
    table: FilterTable
    state: SimState
    material: RodMaterial | ShellMaterial
    scene: Scene
    eta: float
    plan: MotionPlan

    def __iter__(self):
        return iter((self.mesh, self.table, self.state, self.material))


def make_material(d: dict, h: float):
    try:
        if d["kind"] == "rod":
            return RodMaterial(float(d["youngs_modulus"]), float(d["density"]),
                               float(d.get("radius", 0.5 * h)))
        return ShellMaterial(float(d["youngs_modulus"]), float(d.get("poisson_ratio", 0.3)),
                             float(d["density"]), float(d.get("thickness", h)))
    except KeyError as exc:
        raise ScenarioError(f"material: missing {exc}") from None
    except ValueError as exc:
        raise ScenarioError(f"material: {exc}") from None


def _check_core(mesh: CodimMesh, x: np.ndarray, table: FilterTable | None, params: BarrierParams,
                mode: ContactMode, culler) -> None:
    """Reject inputs where an active pair already sits inside its offset."""
    st = broadphase(mesh, x, None, params.h)
    cs = ContactSet.build(st, table, params, mode, culler)
    active_set(x, cs)


def build_scene(config: ScenarioConfig) -> SceneBundle:
    base = Path(config.base_dir) if config.base_dir else None
    mesh = config.geometry.build(base)
    if config.material["kind"] == "rod" and not mesh.is_rod:
        raise ScenarioError("rod material given for a shell mesh")
    if config.material["kind"] == "shell" and mesh.is_rod:
        raise ScenarioError("shell material given for a rod mesh")
    h = config.thickness
    mat = make_material(config.material, h)
    probe = BarrierParams(h, 0.0, config.contact.stiffness)
    table0 = build_filter_table(mesh, probe, config.contact.kappa)
    eta = config.eta_policy.resolve(h, table0.d_min)
    params = BarrierParams(h, eta, config.contact.stiffness)
    table = replace(table0, eta=eta)
    mode = config.contact.contact_mode()
    X = np.array(mesh.reference_positions)
    plan = plan_motions(X, config.motions)
    bc = BoundaryConditions(plan.fixed, plan.positions if len(plan.fixed) else None)
    state = SimState(X.copy(), np.zeros_like(X), lumped_mass(mesh, mat), 0.0, bc)
    gravity = np.zeros(3) if config.gravity is None else np.asarray(config.gravity, dtype=np.float64)
    scene = Scene(mesh, ElasticModel(mesh, mat), params, mode,
                  table if mode.tag == "filtered" else None, gravity, config.solver)
    try:
        _check_core(mesh, X, scene.table, params, mode, scene.culler)
    except ValueError as exc:
        raise ScenarioError(f"input penetrates a contact core: {exc}") from None
    return SceneBundle(config, mesh, table, state, mat, scene, eta, plan)
