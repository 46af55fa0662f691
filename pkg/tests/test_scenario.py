import json
import math
from pathlib import Path

import numpy as np
import pytest

from codimsim.collision import intersection_count
from codimsim.contact import BarrierParams, build_filter_table, pair_key
from codimsim.mesh import reference_distance, Primitive
from codimsim.scenario import (BUILDERS, EtaPolicy, ScenarioError, ScriptedMotion, Selection,
                               apply_motions, build_scene, cloth_grid, config_from_dict,
                               load_config, overhand_knot, straight_yarn)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def base_dict(**over):
    d = {
        "name": "t",
        "geometry": {"builder": "straight_yarn", "params": {"length": 0.01, "segments": 50}},
        "material": {"kind": "rod", "youngs_modulus": 1e6, "density": 1000.0},
        "thickness": 3e-4,
        "contact": {"mode": "filtered", "stiffness": 0.1},
        "frames": 2,
    }
    d.update(over)
    return d


def min_rest(h, d_min):
    finite = d_min[np.isfinite(d_min)]
    return min(h, float(finite.min())) if finite.size else h


# -- builders -----------------------------------------------------------------------------

def test_straight_yarn_counts():
    m = straight_yarn(0.05, 500)
    assert m.n_vertices == 501
    el = m.reference_edge_lengths()
    np.testing.assert_allclose(el, 1e-4, rtol=1e-9)
    table = build_filter_table(m, BarrierParams(h=3e-4))
    assert len(table.keys) > 0


def test_cloth_grid_counts():
    m = cloth_grid(0.2, 0.2, 100, 100)
    assert m.n_vertices == 101 * 101
    # 100 x 100 quads, each split in two
    assert len(m.triangles) == 20000
    assert m.measure() == pytest.approx(0.04)


@pytest.mark.parametrize("segments", [30, 60, 120])
def test_overhand_knot_is_valid_rod(segments):
    m = overhand_knot(segments)
    assert len(m.edges) == segments and m.n_components == 1
    X = m.reference_positions
    assert intersection_count(m, X) == 0
    h = 3e-4
    table = build_filter_table(m, BarrierParams(h=h))
    eta = 0.9 * min_rest(h, table.d_min)
    # unfiltered pairs start outside the biphasic core
    E = m.edges
    for i in range(len(E)):
        for j in range(i + 2, len(E)):
            p, q = Primitive.edge(*E[i]), Primitive.edge(*E[j])
            if p.shares_vertex(q) or table.contains([pair_key(m, p, q)])[0]:
                continue
            assert reference_distance(m, p, q) > eta


def test_builders_registry():
    assert {"straight_yarn", "overhand_knot", "loop", "helix_stack", "cloth_grid",
            "graded_grid"} <= set(BUILDERS)


# -- motions -----------------------------------------------------------------------------

def test_pin_is_constant():
    X = straight_yarn(1.0, 4).reference_positions
    pin = ScriptedMotion("pin", Selection(indices=(0, 1)))
    fixed, P = apply_motions(X, [pin], 7.0)
    assert list(fixed) == [0, 1]
    np.testing.assert_array_equal(P, X[:2])


def test_twist_half_turn():
    X = straight_yarn(1.0, 4).reference_positions
    tw = ScriptedMotion("twist", Selection(indices=(2, 3, 4)), axis_point=(0.5, 0.0, 0.0),
                        axis_dir=(0.0, 0.0, 1.0), angular_velocity=math.pi)
    _, P = apply_motions(X, [tw], 1.0)
    # rotation by pi about the z axis through (0.5, 0, 0) mirrors x about 0.5
    expect = X[2:].copy()
    expect[:, 0] = 1.0 - expect[:, 0]
    np.testing.assert_allclose(P, expect, atol=1e-15)


def test_stretch_pull_separation():
    X = straight_yarn(1.0, 10).reference_positions
    sp = ScriptedMotion("stretch_pull", Selection(indices=(0,)), select_b=Selection(indices=(-1,)),
                        velocity=(-0.001, 0.0, 0.0), t_end=10.0)
    fixed, P0 = apply_motions(X, [sp], 0.0)
    _, P1 = apply_motions(X, [sp], 10.0)
    _, P2 = apply_motions(X, [sp], 25.0)
    sep = lambda P: np.linalg.norm(P[1] - P[0])  # noqa: E731
    assert sep(P1) - sep(P0) == pytest.approx(0.02, abs=1e-15)
    np.testing.assert_array_equal(P1, P2)  # held outside the window


def test_box_selection_and_empty():
    X = straight_yarn(1.0, 10).reference_positions
    x0 = float(X[:, 0].min())
    s = Selection(box_min=(x0 - 0.01, -1, -1), box_max=(x0 + 0.15, 1, 1))
    assert list(s.resolve(X)) == [0, 1]
    with pytest.raises(ScenarioError):
        Selection(box_min=(5, 5, 5), box_max=(6, 6, 6)).resolve(X)


def test_conflicting_prescriptions_rejected():
    X = straight_yarn(1.0, 4).reference_positions
    a = ScriptedMotion("translate", Selection(indices=(0,)), velocity=(1.0, 0, 0))
    b = ScriptedMotion("translate", Selection(indices=(0,)), velocity=(0, 1.0, 0))
    with pytest.raises(ScenarioError):
        apply_motions(X, [a, b], 1.0)
    # sequential windows on the same vertex are fine
    c = ScriptedMotion("translate", Selection(indices=(0,)), velocity=(1.0, 0, 0), t_end=1.0)
    d = ScriptedMotion("translate", Selection(indices=(0,)), velocity=(0, 1.0, 0), t_start=1.0,
                       t_end=2.0)
    _, P = apply_motions(X, [c, d], 2.0)
    np.testing.assert_allclose(P[0], X[0] + [1.0, 1.0, 0.0])


def test_motion_validation():
    with pytest.raises(ScenarioError):
        ScriptedMotion("spin", Selection(indices=(0,)))
    with pytest.raises(ScenarioError):
        ScriptedMotion("pin", Selection(indices=(0,)), t_start=2.0, t_end=1.0)
    with pytest.raises(ScenarioError):
        ScriptedMotion("stretch_pull", Selection(indices=(0,)))


# -- config loading ------------------------------------------------------------------------

@pytest.mark.parametrize("path,key", [((), "colour"), (("contact",), "radius"),
                                      (("material",), "poisson_ratio")])
def test_unknown_keys_rejected(path, key):
    d = base_dict()
    node = d
    for p in path:
        node = node[p]
    node[key] = 1
    with pytest.raises(ScenarioError, match="unknown keys"):
        config_from_dict(d)


def test_missing_and_bad_values():
    d = base_dict()
    del d["thickness"]
    with pytest.raises(ScenarioError):
        config_from_dict(d)
    with pytest.raises(ScenarioError):
        config_from_dict(base_dict(frames=0))
    with pytest.raises(ScenarioError):
        config_from_dict(base_dict(solver={"dt": -1.0}))
    with pytest.raises(ScenarioError):
        config_from_dict(base_dict(geometry={"builder": "nope"})).geometry.build()


def test_eta_policies():
    d_min = np.array([1e-4, np.nan])
    assert EtaPolicy("fraction_of_min", 0.9).resolve(3e-4, d_min) == pytest.approx(0.9e-4)
    assert EtaPolicy("fraction_of_min", 0.9).resolve(3e-4, np.array([np.nan])) == pytest.approx(2.7e-4)
    assert EtaPolicy("fraction_of_h", 0.5).resolve(3e-4, d_min) == pytest.approx(1.5e-4)
    assert EtaPolicy("absolute", 1e-5).resolve(3e-4, d_min) == 1e-5
    with pytest.raises(ScenarioError):
        EtaPolicy("absolute", 3e-4).resolve(3e-4, d_min)


def test_build_scene_from_config():
    b = build_scene(config_from_dict(base_dict()))
    mesh, table, state, mat = b
    assert mesh.n_vertices == 51
    assert np.all(state.v == 0) and state.t == 0.0
    assert len(table.keys) > 0
    assert b.eta == pytest.approx(0.9 * min_rest(3e-4, table.d_min))
    assert mat.radius == pytest.approx(1.5e-4)


def test_build_is_deterministic():
    cfg = config_from_dict(base_dict(motions=[{"kind": "pin", "select": {"indices": [0]}}]))
    a, b = build_scene(cfg), build_scene(cfg)
    assert a.state.x.tobytes() == b.state.x.tobytes()
    np.testing.assert_array_equal(a.table.keys, b.table.keys)
    assert a.eta == b.eta


@pytest.mark.parametrize("name", sorted(p.stem for p in SCENARIOS.glob("*.json")))
def test_shipped_scenarios_load(name):
    cfg = load_config(SCENARIOS / f"{name}.json")
    assert cfg.name == name
    json.loads((SCENARIOS / f"{name}.json").read_text())
    if "200" not in name:
        b = build_scene(cfg)
        assert intersection_count(b.mesh, b.state.x) == 0
