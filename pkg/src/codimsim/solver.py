"""Implicit Euler stepping by projected Newton on the incremental potential."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import BlockPattern, stencil_keys
from .collision import broadphase, contact_set_max_step, swept_crossings
from .contact import (ActiveSet, BarrierParams, ContactMode, ContactSet, Culler, FilterTable,
                      FrictionSet, InfeasibleError, active_set, eval_active, eval_friction,
                      lag_friction)
from .elasticity import ElasticModel
from .mesh import CodimMesh


class SolverError(RuntimeError):
    """Newton/line-search failure or an unsolvable linear system."""


@dataclass(frozen=True)
class SolverParams:
    dt: float = 0.04
    newton_tol: float = 1e-4
    max_newton: int = 200
    armijo_c: float = 1e-4
    step_shrink: float = 0.5
    friction_mu: float = 0.0
    friction_epsv: float = 1e-3
    direct_max_dofs: int = 200000
    cg_rtol: float = 1e-6
    track_crossings: bool = True

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not self.newton_tol > 0.0:
            raise ValueError("newton_tol must be positive")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValueError("step_shrink must lie in (0, 1)")
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("armijo_c must lie in (0, 1)")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")
        if self.friction_mu < 0.0 or self.friction_epsv <= 0.0:
            raise ValueError("friction_mu must be >= 0 and friction_epsv > 0")


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet vertices and their prescribed positions as a function of time."""

    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    motion: Callable[[float], np.ndarray] | None = None

    def targets(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.motion is None:
            return x[self.fixed]
        return np.asarray(self.motion(t), dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class SimState:
    x: np.ndarray
    v: np.ndarray
    masses: np.ndarray
    t: float = 0.0
    bc: BoundaryConditions = field(default_factory=BoundaryConditions)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise ValueError("state has non-finite entries")


@dataclass(eq=False)
class Scene:
    """Everything the stepper needs besides the state."""

    mesh: CodimMesh
    elastic: ElasticModel
    barrier: BarrierParams
    mode: ContactMode
    table: FilterTable | None = None
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    solver: SolverParams = field(default_factory=SolverParams)
    culler: Culler | None = None

    def __post_init__(self):
        if self.mode.tag == "culled" and self.culler is None:
            self.culler = Culler(self.mesh, self.mode.radius)
        self._elastic_keys = None

    def contact_set(self, x, p=None) -> ContactSet:
        st = broadphase(self.mesh, x, p, self.barrier.h)
        return ContactSet.build(st, self.table, self.barrier, self.mode, self.culler)


@dataclass
class StepInfo:
    newton_iters: int = 0
    decrement: float = 0.0
    crossings: int = 0
    energy: float = 0.0
    converged: bool = False


@dataclass
class _Context:
    x_hat: np.ndarray
    free: np.ndarray
    fmap: np.ndarray
    masses: np.ndarray
    friction: FrictionSet | None
    cs: ContactSet | None = None


def _free_map(n: int, fixed: np.ndarray):
    fmap = np.zeros(n, dtype=np.int64)
    fmap[fixed] = -1
    free = np.flatnonzero(fmap == 0)
    fmap[free] = np.arange(len(free))
    return free, fmap


def _potential(x, scene: Scene, ctx: _Context, grad=None, pattern=None, act=None):
    """Incremental potential at ``x``; optional gradient and Hessian accumulation."""
    dt2 = scene.solver.dt ** 2
    dx = x - ctx.x_hat
    E = 0.5 * float(np.sum(ctx.masses[:, None] * dx * dx))
    if grad is not None:
        grad += ctx.masses[:, None] * dx
    E += dt2 * scene.elastic.evaluate(x, grad, dt2, pattern, ctx.fmap)
    if act is None:
        act = active_set(x, ctx.cs)
    E += dt2 * eval_active(x, act, scene.barrier.stiffness, grad, dt2, pattern, ctx.fmap)
    if ctx.friction is not None:
        eps = scene.solver.friction_epsv * scene.solver.dt
        E += dt2 * eval_friction(x, ctx.friction, scene.solver.friction_mu, eps, grad, dt2,
                                 pattern, ctx.fmap)
    return E


def _elastic_keys(scene: Scene, fmap, nf):
    if scene._elastic_keys is None or scene._elastic_keys[0] is not fmap:
        ids = [np.ascontiguousarray(a) for a in scene.elastic.stencil_ids() if len(a)]
        keys = [stencil_keys(a, fmap, nf) for a in ids] or [stencil_keys(np.zeros((0, 1)), fmap, nf)]
        scene._elastic_keys = (fmap, np.unique(np.concatenate(keys)))
    return scene._elastic_keys[1]


def _solve(H: sp.csr_matrix, rhs: np.ndarray, mean_mass: float, params: SolverParams) -> np.ndarray:
    n = H.shape[0]
    shifts = [0.0] + [mean_mass * 10.0 ** k for k in range(-8, 7)]
    eye = sp.identity(n, format="csr")
    for eps in shifts:
        A = H + eps * eye if eps else H
        try:
            p = None
            if n > params.direct_max_dofs:
                try:
                    p = _pcg(A, rhs, params.cg_rtol)
                except RuntimeError:
                    pass  # barrier-dominated systems defeat AMG; fall back to LU
            if p is None:
                p = spla.splu(A.tocsc()).solve(rhs)
        except (RuntimeError, np.linalg.LinAlgError, MemoryError):
            continue
        if np.all(np.isfinite(p)):
            return p
    raise SolverError(f"linear system unsolvable up to shift {shifts[-1]:.3g}")


def _pcg(A, b, rtol):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A, B=None, symmetry="symmetric", max_coarse=500)
    M = ml.aspreconditioner(cycle="V")
    p, info = spla.cg(A, b, rtol=rtol, maxiter=2000, M=M)
    if info != 0:
        raise RuntimeError("CG did not converge")
    return p


def _newton_direction(x, scene: Scene, ctx: _Context):
    n = len(x)
    nf = len(ctx.free)
    grad = np.zeros((n, 3))
    act = active_set(x, ctx.cs)
    ckeys = [stencil_keys(act.ids, ctx.fmap, nf)] if len(act) else []
    if ctx.friction is not None and len(ctx.friction):
        ckeys.append(stencil_keys(ctx.friction.ids, ctx.fmap, nf))
    pattern = BlockPattern.union([_elastic_keys(scene, ctx.fmap, nf)] + ckeys, nf)
    E = _potential(x, scene, ctx, grad, pattern, act)
    pattern.add_diagonal(ctx.masses[ctx.free])
    g = grad[ctx.free].ravel()
    if not np.any(g):
        return E, g, np.zeros((n, 3)), 0.0
    H = pattern.tocsr()
    p_free = _solve(H, -g, float(ctx.masses[ctx.free].mean()), scene.solver)
    p = np.zeros((n, 3))
    p[ctx.free] = p_free.reshape(-1, 3)
    return E, g, p, float(-g @ p_free)


def _line_search(x, p, E0, gp, scene: Scene, ctx: _Context) -> tuple[np.ndarray, float, float]:
    sp_ = scene.solver
    alpha = min(1.0, contact_set_max_step(x, p, ctx.cs))
    tol = 1e-14 * max(abs(E0), 1e-300)
    while alpha >= 1e-12:
        xn = x + alpha * p
        try:
            En = _potential(xn, scene, ctx)
        except InfeasibleError:
            En = math.inf
        if En <= E0 + sp_.armijo_c * alpha * gp + tol:
            return xn, alpha, En
        alpha *= sp_.step_shrink
    raise SolverError("line search step underflow (alpha < 1e-12)")


def _begin_step(state: SimState, scene: Scene):
    dt = scene.solver.dt
    n = len(state.x)
    free, fmap = _free_map(n, state.bc.fixed)
    x = np.array(state.x, dtype=np.float64)
    fixed = state.bc.fixed
    if len(fixed):
        target = state.bc.targets(state.t + dt, x)
        p = np.zeros_like(x)
        p[fixed] = target - x[fixed]
        if np.any(p):
            cs = scene.contact_set(x, p)
            t = contact_set_max_step(x, p, cs)
            if t < 1.0:
                raise SolverError("scripted boundary motion would violate a contact offset")
            x[fixed] = target
    x_hat = state.x + dt * state.v + dt * dt * scene.gravity[None, :]
    x_hat[fixed] = x[fixed]
    friction = None
    if scene.solver.friction_mu > 0.0:
        act0 = active_set(state.x, scene.contact_set(state.x))
        friction = lag_friction(state.x, act0, scene.barrier.stiffness)
    ctx = _Context(x_hat, free, fmap, state.masses, friction)
    return x, ctx


def _converged(p, scene: Scene) -> bool:
    scale = scene.solver.dt * scene.mesh.bbox_diagonal()
    return float(np.abs(p).max(initial=0.0)) <= scene.solver.newton_tol * scale


def incremental_potential(x_candidate, state: SimState, scene: Scene) -> float:
    """0.5|x - x_hat|_M^2 + dt^2 (elastic + contact + friction) with gravity in x_hat."""
    _, ctx = _begin_step(state, scene)
    x = np.asarray(x_candidate, dtype=np.float64)
    ctx.cs = scene.contact_set(x)
    return _potential(x, scene, ctx)


def newton_step(state: SimState, scene: Scene, x=None):
    """Projected Newton direction and decrement ``-g.p`` at ``x`` (default: step start)."""
    x0, ctx = _begin_step(state, scene)
    x = x0 if x is None else np.asarray(x, dtype=np.float64)
    ctx.cs = scene.contact_set(x)
    _, _, p, dec = _newton_direction(x, scene, ctx)
    return p, dec


def line_search(state: SimState, p, scene: Scene) -> float:
    """CCD-capped Armijo backtracking along ``p`` from the step start; returns alpha."""
    x, ctx = _begin_step(state, scene)
    p = np.asarray(p, dtype=np.float64)
    ctx.cs = scene.contact_set(x, p)
    grad = np.zeros_like(x)
    E0 = _potential(x, scene, ctx, grad)
    gp = float(np.sum(grad[ctx.free] * p[ctx.free]))
    if gp >= 0.0:
        raise SolverError("search direction is not a descent direction")
    return _line_search(x, p, E0, gp, scene, ctx)[1]


def advance(state: SimState, scene: Scene, info: StepInfo | None = None) -> SimState:
    """One implicit Euler step."""
    sp_ = scene.solver
    x, ctx = _begin_step(state, scene)
    ctx.cs = scene.contact_set(x)
    info = info if info is not None else StepInfo()
    info.newton_iters = 0
    info.crossings = 0
    info.converged = False
    E = math.nan
    for it in range(sp_.max_newton):
        E, g, p, dec = _newton_direction(x, scene, ctx)
        info.decrement = dec
        if not np.any(p) or _converged(p, scene):
            info.converged = True
            break
        ctx.cs = scene.contact_set(x, p)
        gp = float(g @ p[ctx.free].ravel())
        xn, alpha, E = _line_search(x, p, E, gp, scene, ctx)
        if sp_.track_crossings:
            info.crossings += swept_crossings(scene.mesh, x, xn)
        x = xn
        info.newton_iters = it + 1
    info.energy = E
    v = (x - state.x) / sp_.dt
    return SimState(x, v, state.masses, state.t + sp_.dt, state.bc)


def net_force_norm(x, scene: Scene, masses, fixed) -> float:
    """Max per-vertex norm of the net internal + external force on free vertices."""
    n = len(x)
    grad = np.zeros((n, 3))
    scene.elastic.evaluate(x, grad)
    eval_active(x, active_set(x, scene.contact_set(x)), scene.barrier.stiffness, grad)
    f = -grad + masses[:, None] * scene.gravity[None, :]
    f[fixed] = 0.0
    return float(np.linalg.norm(f, axis=1).max(initial=0.0))


@dataclass
class RelaxResult:
    state: SimState
    steps: int
    residual: float
    converged: bool


def relax_to_equilibrium(state: SimState, scene: Scene, force_tol: float,
                         max_steps: int = 200, vel_tol: float = 1e-6) -> RelaxResult:
    """Quasistatic relaxation: advance with velocities reset after every step."""
    state = replace(state, v=np.zeros_like(state.v))
    res = net_force_norm(state.x, scene, state.masses, state.bc.fixed)
    if res < force_tol:
        return RelaxResult(state, 0, res, True)
    calm = 0
    for k in range(1, max_steps + 1):
        nxt = advance(state, scene)
        speed = float(np.abs(nxt.v).max(initial=0.0))
        state = replace(nxt, v=np.zeros_like(nxt.v))
        res = net_force_norm(state.x, scene, state.masses, state.bc.fixed)
        calm = calm + 1 if speed < vel_tol else 0
        if res < force_tol or calm >= 5:
            return RelaxResult(state, k, res, True)
    return RelaxResult(state, max_steps, res, False)
