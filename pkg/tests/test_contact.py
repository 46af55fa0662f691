import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from codimsim.collision import all_stencils, broadphase
from codimsim.contact import (BarrierParams, ContactMode, ContactSet, FilterTable,
                              InfeasibleError, activation_arrays, active_set, barrier,
                              barrier_biphasic, barrier_derivs, build_filter_table,
                              contact_admissible, contact_energy, effective_activation,
                              friction_force, lag_friction, stencil_distances)
from codimsim.mesh import CodimMesh, MeshError, Primitive, concat_rods, parametric_distance
from codimsim.proximity import PairKind, pair_distance

from conftest import FD_STATES, central_gradient, rel_err

MM = 1e-3


def straight(n, L, offset=(0.0, 0.0, 0.0)):
    X = np.zeros((n + 1, 3))
    X[:, 0] = L * np.arange(n + 1)
    return CodimMesh.polyline(X + np.asarray(offset))


def arc(n, L, bend=0.3):
    """Planar polyline with constant turning angle ``bend`` per vertex."""
    ang = bend * np.arange(n)
    steps = L * np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)
    return CodimMesh.polyline(np.vstack([np.zeros(3), np.cumsum(steps, axis=0)]))


# -- scalar barrier ----------------------------------------------------------------

def test_barrier_values():
    assert barrier(1.0, 1.0) == 0.0
    assert barrier(2.0, 1.0) == 0.0
    assert abs(barrier(0.5, 1.0) - 0.17328679) < 1e-8


def test_biphasic_values():
    assert abs(barrier_biphasic(0.6, 1.0, 0.5) - 0.25751) < 1e-5
    assert barrier_biphasic(1.0, 1.0, 0.5) == 0.0
    for d, a in [(0.1, 1.0), (0.7, 0.9), (3e-4, 1e-3)]:
        assert barrier_biphasic(d, a, 0.0) == barrier(d, a)


def test_barrier_errors():
    with pytest.raises(InfeasibleError):
        barrier(0.0, 1.0)
    with pytest.raises(InfeasibleError):
        barrier_biphasic(0.5, 1.0, 0.5)
    with pytest.raises(ValueError):
        barrier_biphasic(0.9, 0.5, 0.5)


@given(st.floats(1e-6, 1.0 - 1e-6), st.floats(1e-3, 1e3))
def test_barrier_positive_and_decreasing(u, a):
    d = u * a
    assert barrier(d, a) > 0.0
    assert barrier_derivs(d, a)[1] < 0.0


def test_barrier_vanishes_smoothly_at_support_edge():
    a = 1.0
    b, b1, b2 = barrier_derivs(a - 1e-8, a)
    assert b < 1e-15 and abs(b1) < 1e-7 and abs(b2) < 1e-6
    assert barrier_derivs(a, a) == (0.0, 0.0, 0.0)


@given(st.floats(0.01, 0.99), st.floats(1e-4, 10.0))
@settings(max_examples=FD_STATES)
def test_barrier_derivatives_fd(u, a):
    d = u * a
    step = 1e-6 * d
    _, b1, b2 = barrier_derivs(d, a)
    fd1 = (barrier(d + step, a) - barrier(d - step, a)) / (2 * step)
    fd2 = (barrier_derivs(d + step, a)[1] - barrier_derivs(d - step, a)[1]) / (2 * step)
    assert abs(fd1 - b1) <= 1e-4 * abs(b1)
    assert abs(fd2 - b2) <= 1e-4 * abs(b2)


@given(st.floats(0.01, 0.99), st.floats(1e-4, 10.0), st.floats(0.0, 0.95))
@settings(max_examples=FD_STATES)
def test_biphasic_derivative_fd(u, a, f):
    eta = f * a
    d = eta + u * (a - eta)
    step = 1e-6 * (d - eta)
    _, b1, _ = barrier_derivs(d - eta, a - eta)
    fd = (barrier_biphasic(d + step, a, eta) - barrier_biphasic(d - step, a, eta)) / (2 * step)
    assert abs(fd - b1) <= 1e-4 * abs(b1)


# -- parameters and modes ----------------------------------------------------------------

def test_barrier_params_validation():
    with pytest.raises(ValueError):
        BarrierParams(h=1.0, eta=1.0)
    with pytest.raises(ValueError):
        BarrierParams(h=1.0, stiffness=0.0)
    assert BarrierParams(1.0, 0.25).dhat == 0.75


def test_contact_mode_validation():
    with pytest.raises(ValueError):
        ContactMode.culled(0)
    with pytest.raises(ValueError):
        ContactMode("filtered", 3)
    assert ContactMode.parse("culled", 5) == ContactMode("culled", 5)


# -- filter table --------------------------------------------------------------------------

def brute_force_dmin(mesh, h, kappa):
    """Enumerate every non-adjacent edge pair, apply the window and the rest test."""
    best = math.inf
    E = mesh.edges
    X = mesh.reference_positions
    for i in range(len(E)):
        for j in range(i + 1, len(E)):
            p, q = Primitive.edge(*E[i]), Primitive.edge(*E[j])
            if p.shares_vertex(q) or parametric_distance(mesh, p, q) >= kappa * h:
                continue
            d = pair_distance(PairKind.EDGE_EDGE, X[list(E[i]) + list(E[j])]).value
            if d < h:
                best = min(best, d)
    return best


def test_dmin_straight_polyline_matches_enumeration():
    h = 0.3 * MM
    L = 0.4 * h
    mesh = straight(40, L)
    table = build_filter_table(mesh, BarrierParams(h))
    assert table.d_min[0] == brute_force_dmin(mesh, h, 2.0)
    assert table.d_min[0] == pytest.approx(L, rel=1e-12)
    assert len(table) > 0


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_dmin_curved_polyline_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    h = 1.0
    mesh = arc(14, rng.uniform(0.2, 0.9), rng.uniform(0.0, 0.6))
    table = build_filter_table(mesh, BarrierParams(h), kappa=2.0)
    expect = brute_force_dmin(mesh, h, 2.0)
    if math.isinf(expect):
        assert len(table) == 0
    else:
        assert table.d_min[0] == expect


def test_coarse_polyline_has_no_filtered_pairs():
    h = 0.3 * MM
    table = build_filter_table(straight(20, 2 * h), BarrierParams(h), kappa=2.0)
    assert len(table) == 0
    assert np.isnan(table.d_min[0])


def test_two_yarns_never_cross_filtered():
    h = 0.3 * MM
    m = concat_rods([straight(10, 2 * h), straight(10, 2 * h, offset=(0, 0.5 * h, 0))])
    table = build_filter_table(m, BarrierParams(h))
    assert len(table) == 0
    fine = concat_rods([straight(30, 0.4 * h), straight(30, 0.4 * h, offset=(0, 0.5 * h, 0))])
    table = build_filter_table(fine, BarrierParams(h))
    assert len(table) > 0
    st_ = all_stencils(fine).subset(table.contains(all_stencils(fine).keys))
    comp = table.component_of(st_.verts)
    assert np.all(fine.component_id[st_.verts[:, 0]] == fine.component_id[st_.verts[:, 2]])
    assert set(comp) == {0, 1}


def test_intrinsic_self_intersection_rejected():
    X = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 0, 0.0]])
    m = CodimMesh.rod(X[[0, 1, 2]], [[0, 1], [1, 2]])
    assert len(build_filter_table(m, BarrierParams(1.0))) == 0
    # a polyline folding back onto itself within the window
    Y = np.array([[0, 0, 0], [1, 0, 0], [1, 0.1, 0], [0.5, 0.1, 0], [0.5, -0.1, 0]])
    bad = CodimMesh.polyline(Y)
    with pytest.raises(MeshError):
        build_filter_table(bad, BarrierParams(1.0))


def test_filter_table_invariants():
    h = 1.0
    mesh = arc(30, 0.3, 0.2)
    table = build_filter_table(mesh, BarrierParams(h, eta=0.5))
    assert table.mode == "biphasic"
    assert 0.0 < table.d_min[0] <= h
    st_ = all_stencils(mesh)
    dref = stencil_distances(np.ascontiguousarray(mesh.reference_positions), st_.kinds, st_.verts)
    f = table.contains(st_.keys)
    assert np.all(dref[f] < h)
    for (p, q), (a, eta) in list(table.filtered_pairs.items())[:20]:
        assert parametric_distance(mesh, p, q) < table.kappa * h
        assert (a, eta) == (table.d_min[0], 0.0)


def test_pair_at_exactly_h_is_unfiltered():
    # vertex-to-vertex gap of exactly 1 between edge (0,1) and edge (2,3)
    X = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
    m = CodimMesh.polyline(X)
    table = build_filter_table(m, BarrierParams(1.0), kappa=4.0)
    assert len(table) == 0


# -- effective activation ------------------------------------------------------------------

def test_effective_activation_unfiltered():
    p = BarrierParams(1 * MM, 0.9 * MM)
    m = straight(10, 2 * MM)
    table = build_filter_table(m, p)
    pair = (Primitive.edge(0, 1), Primitive.edge(5, 6))
    assert effective_activation(pair, table, p) == (1 * MM, 0.9 * MM)


@pytest.mark.parametrize("eta", [0.0, 0.3 * MM])
def test_effective_activation_filtered(eta):
    p = BarrierParams(1 * MM, eta)
    m = straight(20, 0.4 * MM)
    table = build_filter_table(m, p)
    a, e = effective_activation((Primitive.edge(0, 1), Primitive.edge(2, 3)), table, p)
    assert a == pytest.approx(0.4 * MM, rel=1e-12)
    assert e == 0.0
    # fixed for the table: repeated queries agree exactly
    assert effective_activation((Primitive.edge(0, 1), Primitive.edge(2, 3)), table, p) == (a, e)


# -- admissibility ---------------------------------------------------------------------------

def test_contact_admissible_examples():
    m = straight(30, 1.0)
    v = Primitive.vertex
    assert not contact_admissible((v(3), v(7)), m, ContactMode.culled(5))
    assert contact_admissible((v(3), v(12)), m, ContactMode.culled(5))
    assert contact_admissible((v(3), v(5)), m, ContactMode.filtered())
    assert contact_admissible((v(3), v(5)), m, ContactMode.plain())
    assert not contact_admissible((Primitive.edge(3, 4), v(4)), m, ContactMode.plain())


# -- energies ---------------------------------------------------------------------------------

def test_rest_rod_filtered_zero_plain_expansive():
    h = 0.3 * MM
    m = straight(50, 0.4 * h)
    p = BarrierParams(h)
    table = build_filter_table(m, p)
    x = np.array(m.reference_positions)
    pairs = broadphase(m, x, None, h)
    r = contact_energy(x, pairs, table, p, ContactMode.filtered())
    assert r.energy == 0.0 and not np.any(r.gradient)
    r = contact_energy(x, pairs, None, p, ContactMode.plain())
    assert r.energy > 0.0 and np.linalg.norm(r.gradient) > 0.0
    # the outermost closest points sit on vertices 1 and n-1; both are pushed outwards
    assert r.gradient[1, 0] > 0.0 and r.gradient[-2, 0] < 0.0


def test_no_pairs_in_range():
    m = straight(5, 1.0)
    p = BarrierParams(0.1)
    x = np.array(m.reference_positions)
    r = contact_energy(x, broadphase(m, x, None, p.h), None, p, ContactMode.plain())
    assert r.energy == 0.0 and not np.any(r.gradient) and r.hessian.nnz == 0


def test_infeasible_pair_reported():
    h = 1.0
    m = concat_rods([straight(2, 1.0), straight(2, 1.0, offset=(0, 0.1, 0))])
    p = BarrierParams(h, eta=0.5)
    x = np.array(m.reference_positions)
    with pytest.raises(InfeasibleError, match="pair"):
        contact_energy(x, broadphase(m, x, None, h), None, p, ContactMode.plain())


@given(st.integers(0, 10_000))
def test_filtered_rest_gradient_is_zero(seed):
    rng = np.random.default_rng(seed)
    # total turning below pi keeps the curve free of design overlaps
    m = arc(40, rng.uniform(0.05, 0.5), rng.uniform(0.0, 0.075))
    p = BarrierParams(1.0, eta=rng.uniform(0.0, 0.9))
    table = build_filter_table(m, p)
    x = np.array(m.reference_positions)
    r = contact_energy(x, broadphase(m, x, None, p.h), table, p, ContactMode.filtered())
    assert not np.any(r.gradient)


def _mixed_scene():
    # a hairpin: arms are far apart along the rod but within h of each other
    h = 1.0
    n = 24
    t = np.linspace(0.0, math.pi, n)
    X = np.concatenate([
        np.stack([np.linspace(-4, 0, 10)[:-1], np.full(9, -0.7), np.zeros(9)], axis=1),
        np.stack([0.7 * np.sin(t), -0.7 * np.cos(t), np.zeros(n)], axis=1),
        np.stack([np.linspace(0, -4, 10)[1:], np.full(9, 0.7), np.zeros(9)], axis=1),
    ])
    m = CodimMesh.polyline(X)
    p = BarrierParams(h, eta=0.2)
    return m, p, build_filter_table(m, p)


def test_mixed_scene_has_both_pair_types():
    m, p, table = _mixed_scene()
    st_ = broadphase(m, np.array(m.reference_positions), None, p.h)
    f = table.contains(st_.keys)
    assert f.any() and (~f).any()


@given(st.integers(0, 2**31))
@settings(max_examples=100)
def test_unfiltered_pairs_match_plain_barrier(seed):
    m, p, table = _mixed_scene()
    rng = np.random.default_rng(seed)
    x = np.array(m.reference_positions) + rng.normal(scale=0.02, size=(m.n_vertices, 3))
    pairs = broadphase(m, x, None, p.h)
    d = stencil_distances(x, pairs.kinds, pairs.verts)
    af, ef = activation_arrays(pairs, table, p)
    ab, eb = activation_arrays(pairs, None, p)
    unf = ~table.contains(pairs.keys)
    assert unf.any()
    for k in np.flatnonzero(unf):
        assume(d[k] > ef[k])
        e1 = barrier_biphasic(d[k], af[k], ef[k])
        e2 = barrier_biphasic(d[k], ab[k], eb[k])
        assert abs(e1 - e2) <= 1e-12 * max(abs(e2), 1e-300)


def _fd_contact(m, p, table, mode, x, step):
    pairs = broadphase(m, x, None, 2.0 * p.h)

    def energy(flat):
        return contact_energy(flat.reshape(-1, 3), pairs, table, p, mode, hessian=False).energy

    r = contact_energy(x, pairs, table, p, mode, hessian=False)
    cs = ContactSet.build(pairs, table, p, mode)
    ref = active_set(x, cs)
    for sgn in (1.0, -1.0):
        for i in range(x.size):
            y = x.copy()
            y.flat[i] += sgn * step
            a2 = active_set(y, cs)
            assume(len(a2) == len(ref) and np.array_equal(a2.sub, ref.sub)
                   and np.array_equal(a2.ids, ref.ids))
    return r.gradient.ravel(), central_gradient(energy, x.ravel(), step)


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_filtered_energy_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    h = 1.0
    m = arc(6, 0.45, rng.uniform(0.3, 0.9))
    p = BarrierParams(h, eta=0.1)
    table = build_filter_table(m, p)
    x = np.array(m.reference_positions) + rng.normal(scale=0.04, size=(m.n_vertices, 3))
    g, g_fd = _fd_contact(m, p, table, ContactMode.filtered(), x, 1e-7)
    assume(np.linalg.norm(g) > 1e-8)
    assert rel_err(g, g_fd) < 1e-4


@given(st.integers(0, 2**31))
@settings(max_examples=200)
def test_plain_contact_hessian_fd(seed):
    rng = np.random.default_rng(seed)
    m = arc(5, 0.45, rng.uniform(0.3, 0.9))
    p = BarrierParams(1.0, eta=0.1)
    x = np.array(m.reference_positions) + rng.normal(scale=0.04, size=(m.n_vertices, 3))
    pairs = broadphase(m, x, None, 2.0)
    r = contact_energy(x, pairs, None, p, ContactMode.plain())
    H = r.hessian.toarray()
    assume(np.linalg.norm(H) > 0)
    step = 1e-7
    cols = []
    for i in range(x.size):
        y = x.copy()
        y.flat[i] += step
        z = x.copy()
        z.flat[i] -= step
        gp = contact_energy(y, pairs, None, p, ContactMode.plain(), hessian=False).gradient
        gm = contact_energy(z, pairs, None, p, ContactMode.plain(), hessian=False).gradient
        cols.append((gp - gm).ravel() / (2 * step))
    H_fd = np.array(cols).T
    assert rel_err(H, H_fd) < 1e-4


# -- friction ----------------------------------------------------------------------------------

def _friction_scene(seed):
    rng = np.random.default_rng(seed)
    m = concat_rods([straight(3, 1.0), straight(3, 1.0, offset=(0.5, 0.3, 0.0))])
    x0 = np.array(m.reference_positions) + rng.normal(scale=0.02, size=(m.n_vertices, 3))
    p = BarrierParams(1.0)
    pairs = broadphase(m, x0, None, p.h)
    act = active_set(x0, ContactSet.build(pairs, None, p, ContactMode.plain()))
    return m, x0, lag_friction(x0, act, 1.0)


def test_zero_friction_coefficient():
    _, x0, fs = _friction_scene(0)
    x = x0 + 0.01
    D, g, _ = friction_force(x, fs, 0.0, 1e-3, 0.04)
    assert D == 0.0 and not np.any(g)


def test_zero_slip_zero_gradient():
    _, x0, fs = _friction_scene(1)
    assert len(fs) > 0
    D, g, _ = friction_force(x0, fs, 0.5, 1e-3, 0.04)
    assert D == 0.0 and not np.any(g)


@given(st.integers(0, 2**31))
@settings(max_examples=300)
def test_friction_force_bounded_by_coulomb(seed):
    m, x0, fs = _friction_scene(seed % 97)
    rng = np.random.default_rng(seed)
    mu = 0.4
    x = x0 + rng.normal(scale=10.0 ** rng.uniform(-8, -1), size=x0.shape)
    _, g, _ = friction_force(x, fs, mu, 1e-3, 0.04, hessian=False)
    # per pair force on the first-side vertices is bounded by mu * lambda
    for q in range(len(fs)):
        single = type(fs)(fs.ids[q:q + 1], fs.nv[q:q + 1], fs.weights[q:q + 1], fs.basis[q:q + 1],
                          fs.normal_force[q:q + 1], fs.x_lag)
        _, gq, _ = friction_force(x, single, mu, 1e-3, 0.04, hessian=False)
        f = np.linalg.norm(gq[fs.ids[q, 0]]) / abs(fs.weights[q, 0])
        assert f <= mu * fs.normal_force[q] * (1 + 1e-9) + 1e-300


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_friction_gradient_fd(seed):
    m, x0, fs = _friction_scene(seed % 89)
    rng = np.random.default_rng(seed)
    eps = 1e-3 * 0.04
    x = x0 + rng.normal(scale=10.0 ** rng.uniform(-5.5, -3), size=x0.shape)

    def energy(flat):
        return friction_force(flat.reshape(-1, 3), fs, 0.3, 1e-3, 0.04, hessian=False)[0]

    _, g, _ = friction_force(x, fs, 0.3, 1e-3, 0.04, hessian=False)
    step = 1e-4 * eps
    g_fd = central_gradient(energy, x.ravel(), step)
    assume(np.linalg.norm(g) > 1e-12)
    assert rel_err(g.ravel(), g_fd) < 1e-4
