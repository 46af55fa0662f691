import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from codimsim.elasticity import (ElasticModel, RodMaterial, ShellMaterial, dihedral_angle,
                                 lumped_mass, rod_bend, rod_stretch, shell_bend, shell_membrane)
from codimsim.mesh import CodimMesh, grid_shell

from conftest import FD_STATES, central_gradient, rel_err

ROD = RodMaterial(youngs_modulus=2.0e6, density=1000.0, radius=1e-2)
SHELL = ShellMaterial(youngs_modulus=8e5, poisson_ratio=0.3, density=500.0, thickness=1e-3)


def rotation(seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


def hinge_mesh(X=None):
    if X is None:
        X = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [-1, 0, 0]], dtype=float)
    return CodimMesh.shell(X, [[0, 2, 1], [0, 1, 3]])


def random_rod(seed, n=4):
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n, 3))
    X = np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
    m = CodimMesh.polyline(X)
    x = X + rng.normal(scale=0.2, size=X.shape)
    return m, x


def random_shell(seed):
    rng = np.random.default_rng(seed)
    X = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [-1, 0.2, 0]], dtype=float)
    X += rng.normal(scale=0.15, size=X.shape)
    m = hinge_mesh(X)
    x = X @ rotation(seed).T + rng.normal(scale=0.15, size=X.shape)
    return m, x


# -- rod stretch -------------------------------------------------------------------

def test_stretch_rest_is_zero():
    m, _ = random_rod(0)
    E, g, _ = rod_stretch(m.reference_positions, m, ROD)
    assert E == 0.0 and not np.any(g)


def test_stretch_one_percent():
    m = CodimMesh.polyline(np.array([[0, 0, 0], [1, 0, 0.0]]))
    mat = RodMaterial(1.0, 1.0, math.sqrt(1.0 / math.pi))
    E, _, _ = rod_stretch(np.array([[0, 0, 0], [1.01, 0, 0]]), m, mat)
    assert E == pytest.approx(5e-5, rel=1e-9)


@given(st.integers(0, 10_000))
def test_rod_energies_rigid_invariant(seed):
    m, x = random_rod(seed, 5)
    R = rotation(seed + 7)
    y = x @ R.T + np.random.default_rng(seed).normal(size=3)
    for fn in (rod_stretch, rod_bend):
        e0 = fn(x, m, ROD, hessian=False)[0]
        e1 = fn(y, m, ROD, hessian=False)[0]
        assert abs(e1 - e0) <= 1e-10 * max(abs(e0), 1e-300)
    assert rod_stretch(m.reference_positions @ R.T, m, ROD, hessian=False)[0] < 1e-20


# -- rod bend ------------------------------------------------------------------------

def test_bend_straight_zero():
    X = np.zeros((6, 3))
    X[:, 0] = np.arange(6)
    m = CodimMesh.polyline(X)
    assert rod_bend(X, m, ROD)[0] == 0.0


def test_bend_right_angle_curvature():
    X = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0.0]])
    m = CodimMesh.polyline(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]))
    E = rod_bend(X, m, ROD)[0]
    # |kappa b| = 2 tan(pi/4) = 2, Voronoi length 1
    assert E == pytest.approx(ROD.bend_stiffness * 4.0 / 2.0, rel=1e-12)


def test_bend_antiparallel_is_singular():
    X = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0.0]])
    m = CodimMesh.polyline(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]))
    with pytest.raises(FloatingPointError):
        rod_bend(X, m, ROD)


# -- shell membrane ---------------------------------------------------------------------

def test_membrane_rest_and_rigid():
    m = grid_shell(3, 3, 1.0, 1.0)
    # energy scale mu * h * A is about 0.3; allow roundoff only
    assert shell_membrane(m.reference_positions, m, SHELL)[0] == pytest.approx(0.0, abs=1e-13)
    y = m.reference_positions @ rotation(3).T + 0.5
    assert shell_membrane(y, m, SHELL)[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("s", [0.8, 1.0, 1.1, 1.5])
def test_membrane_equibiaxial(s):
    m = grid_shell(2, 2, 1.0, 1.0)
    E = shell_membrane(s * m.reference_positions, m, SHELL)[0]
    mu, lam = SHELL.lame
    J = s * s
    psi = 0.5 * mu * (2 * s * s - 2 - 2 * math.log(J)) + 0.5 * lam * math.log(J) ** 2
    assert E == pytest.approx(SHELL.thickness * 1.0 * psi, rel=1e-10)


def test_membrane_lame_plane_stress():
    mu, lam = SHELL.lame
    assert mu == pytest.approx(8e5 / 2.6)
    assert lam == pytest.approx(8e5 * 0.3 / (1 - 0.09))


def test_membrane_collapsed_raises():
    m = hinge_mesh()
    x = np.array(m.reference_positions)
    x[2] = [0.0, 0.5, 0.0]  # onto the shared edge, zero area
    with pytest.raises(FloatingPointError):
        shell_membrane(x, m, SHELL)


# -- shell bending ------------------------------------------------------------------------

def test_hinge_rest_and_flat():
    m = hinge_mesh()
    assert shell_bend(m.reference_positions, m, SHELL)[0] == 0.0
    y = m.reference_positions @ rotation(5).T
    assert shell_bend(y, m, SHELL)[0] == pytest.approx(0.0, abs=1e-20)


def test_hinge_fold_quarter_turn():
    m = hinge_mesh()
    x = np.array(m.reference_positions)
    x[3] = [0.0, 0.0, 1.0]
    # independent dihedral from face normals
    n1 = np.cross(x[2] - x[0], x[1] - x[0])
    n2 = np.cross(x[1] - x[0], x[3] - x[0])
    theta = math.pi - math.acos(np.dot(n1, n2) / np.linalg.norm(n1) / np.linalg.norm(n2))
    assert theta == pytest.approx(math.pi / 2)
    assert dihedral_angle(x[[0, 1, 2, 3]]) == pytest.approx(math.pi / 2)
    e = 1.0
    he = (0.5 + 0.5) / (3.0 * e)
    expect = SHELL.bend_stiffness * (math.pi / 2) ** 2 * e / he
    assert shell_bend(x, m, SHELL)[0] == pytest.approx(expect, rel=1e-12)


def test_bend_constant():
    assert SHELL.bend_stiffness == pytest.approx(8e5 * 1e-9 / (24 * 0.91))


# -- lumped mass ---------------------------------------------------------------------------

def test_rod_mass_examples():
    X = np.zeros((3, 3))
    X[:, 0] = [0, 0.01, 0.02]
    m = CodimMesh.polyline(X)
    mass = lumped_mass(m, RodMaterial(1.0, 1000.0, 0.001))
    assert mass[1] == pytest.approx(3.14159e-5, rel=1e-5)
    assert mass[0] == pytest.approx(0.5 * mass[1], rel=1e-14)
    assert mass.sum() == pytest.approx(1000.0 * math.pi * 1e-6 * 0.02, rel=1e-14)


def test_shell_mass_total_exact():
    m = grid_shell(7, 5, 0.3, 0.2)
    mass = lumped_mass(m, SHELL)
    assert mass.sum() == pytest.approx(500.0 * 1e-3 * 0.06, rel=1e-13)


# -- finite differences -----------------------------------------------------------------------

def _energy_fn(mesh, mat, part):
    model = ElasticModel(mesh, mat)

    def f(flat):
        return model.evaluate(flat.reshape(-1, 3), parts=(part,))

    def grad(x):
        g = np.zeros_like(x)
        model.evaluate(x, g, parts=(part,))
        return g

    return f, grad


def _check_fd(mesh, mat, part, x, step=1e-6):
    f, grad = _energy_fn(mesh, mat, part)
    g = grad(x)
    assume(np.linalg.norm(g) > 1e-12)
    g_fd = central_gradient(f, x.ravel(), step)
    assert rel_err(g.ravel(), g_fd) < 1e-4


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_rod_stretch_fd(seed):
    m, x = random_rod(seed)
    _check_fd(m, ROD, "stretch", x)


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_rod_bend_fd(seed):
    m, x = random_rod(seed)
    _check_fd(m, ROD, "bend", x)


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_membrane_fd(seed):
    m, x = random_shell(seed)
    model = ElasticModel(m, SHELL)
    try:
        model.evaluate(x, parts=("stretch",))
    except FloatingPointError:
        assume(False)
    _check_fd(m, SHELL, "stretch", x)


@given(st.integers(0, 2**31))
@settings(max_examples=FD_STATES)
def test_hinge_fd(seed):
    m, x = random_shell(seed)
    _check_fd(m, SHELL, "bend", x)


# -- Hessians ----------------------------------------------------------------------------------

PARTS = [("rod", "stretch"), ("rod", "bend"), ("shell", "stretch"), ("shell", "bend")]


def _sample(kind, seed):
    if kind == "rod":
        m, x = random_rod(seed)
        return m, x, ROD
    m, x = random_shell(seed)
    return m, x, SHELL


def _hessian(m, mat, part, x, project):
    fns = {("rod", "stretch"): rod_stretch, ("rod", "bend"): rod_bend,
           ("shell", "stretch"): shell_membrane, ("shell", "bend"): shell_bend}
    fn = fns[("rod" if m.is_rod else "shell", part)]
    return fn(x, m, mat, hessian=True, project=project)[2].toarray()


@pytest.mark.parametrize("kind,part", PARTS)
@given(seed=st.integers(0, 2**31))
@settings(max_examples=200)
def test_hessian_matches_gradient_differences(kind, part, seed):
    m, x, mat = _sample(kind, seed)
    try:
        H = _hessian(m, mat, part, x, project=False)
    except FloatingPointError:
        assume(False)
    _, grad = _energy_fn(m, mat, part)
    step = 1e-6
    cols = []
    for i in range(x.size):
        y = x.copy()
        z = x.copy()
        y.flat[i] += step
        z.flat[i] -= step
        cols.append((grad(y) - grad(z)).ravel() / (2 * step))
    assume(np.linalg.norm(H) > 0)
    assert rel_err(H, np.array(cols).T) < 1e-4


@pytest.mark.parametrize("kind,part", PARTS)
@given(seed=st.integers(0, 2**31))
@settings(max_examples=200)
def test_projected_hessian_is_psd(kind, part, seed):
    m, x, mat = _sample(kind, seed)
    try:
        H = _hessian(m, mat, part, x, project=True)
    except FloatingPointError:
        assume(False)
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    assert w.min() >= -1e-10 * max(1.0, np.abs(w).max())
