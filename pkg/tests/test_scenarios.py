"""Tests for the two wired scenarios: builders, closed forms, and probes.

The linear scenario is checked against its matrix closed forms and the exact
equivalence of the hand-inlined fast right-hand side with the generic
driven-system composition.  The formation scenario is checked against the
planar gradient-flow lift: the Lie-derivative identity behind it, frozen
headings, a machine-precision match of the bracket-assembled limit at N = 2,
finite differences for the potential gradient, rigid-motion equivariance with
a broken-symmetry negative control, and frozen stability-probe regression
values from the canonical triangle start.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from bracketflow.input_signals import Lam
from bracketflow.scenarios import (
    LIMIT_STEP,
    FormationScenario,
    LinearOutputScenario,
    build_formation_scenario,
    build_linear_scenario,
    build_scenario,
    formation_set_distance,
    gradient_potential,
    list_scenarios,
    rigid_motion,
    rotation_invariance_check,
    unicycle_fields,
)
from bracketflow.simulator import convergence_sweep, driven_rhs, integrate
from bracketflow.stability_lab import probe_lues, probe_pluas
from bracketflow.vector_fields import assemble_extended, lie_derivative

TRIANGLE = None  # complete graph, the default edge set
UNIT = 1.0


def pos_slots(N):
    return np.array([k for k in range(3 * N) if k % 3 != 2])


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def test_registry_lists_both_scenarios():
    names = list_scenarios()
    assert set(names) == {"linear", "formation"}
    assert all(isinstance(d, str) and d for d in names.values())


def test_build_scenario_rejects_unknown_names():
    with pytest.raises(ValueError, match="unknown scenario"):
        build_scenario("pendulum")


def test_bundle_unpacks_family_limit_distance_probe():
    bundle = build_scenario("linear")
    family, limit_rhs, dist, probe = bundle
    rhs, h = family(3)
    assert callable(rhs) and h > 0.0
    assert callable(limit_rhs)
    assert dist.distance(np.array([0.0]), np.array([2.0])) == 2.0
    assert probe.js == [1, 10, 100]


# ---------------------------------------------------------------------------
# Linear scenario: validation
# ---------------------------------------------------------------------------

def test_linear_rejects_rank_deficient_columns():
    with pytest.raises(ValueError, match="full row rank"):
        build_linear_scenario(A=np.eye(2), B=[[1.0], [0.0]],
                              family="sinusoid", x0=(1.0, 0.0))


def test_linear_rejects_nonsquare_dynamics():
    with pytest.raises(ValueError, match="square"):
        LinearOutputScenario(A=[[1.0, 0.0]])


def test_sawtooth_family_is_single_column_unit_gain():
    with pytest.raises(ValueError, match="one dither pair"):
        build_linear_scenario(A=np.eye(2), B=np.eye(2), x0=(1.0, 0.0))
    with pytest.raises(ValueError, match="unit gain"):
        build_linear_scenario(lam=2.0)


def test_linear_rejects_mismatched_frequency_list():
    with pytest.raises(ValueError, match="carrier frequency"):
        build_linear_scenario(family="sinusoid", omegas=(1.0, 2.0))


def test_linear_warns_when_limit_is_not_hurwitz():
    with pytest.warns(UserWarning, match="not Hurwitz"):
        build_linear_scenario(A=((3.0,),))


# ---------------------------------------------------------------------------
# Linear scenario: closed forms
# ---------------------------------------------------------------------------

def test_default_limit_is_unit_exponential_decay():
    bundle = build_linear_scenario()
    assert np.array_equal(bundle.extras["limit_matrix"], [[-1.0]])
    assert bundle.limit_rhs(0.3, np.array([2.0]))[0] == -2.0


def test_sinusoid_limit_matrix_matches_gain_formula():
    bundle = build_linear_scenario(
        family="sinusoid", A=[[0.0, 1.0], [-1.0, 0.0]], B=np.eye(2),
        lam=(1.0, 2.0), x0=(1.0, 0.0))
    M = bundle.extras["limit_matrix"]
    assert np.allclose(M, [[-2.0, 1.0], [-1.0, -4.0]], atol=1e-14)
    x = np.array([0.4, -1.1])
    assert np.allclose(bundle.limit_rhs(0.0, x), M @ x, atol=1e-14)


def test_time_varying_gain_enters_the_limit_pointwise():
    lam = Lam(lambda t: 1.0 + 0.5 * math.sin(t), 1.5,
              derivative_fn=lambda t: 0.5 * math.cos(t),
              derivative_bound=0.5)
    bundle = build_linear_scenario(family="sinusoid", lam=(lam,))
    for t in (0.0, 0.7, 2.5):
        got = bundle.limit_rhs(t, np.array([0.8]))[0]
        assert got == pytest.approx(
            (1.0 - 2.0 * (1.0 + 0.5 * math.sin(t))) * 0.8, rel=1e-14)


def test_fast_rhs_matches_generic_composition_sawtooth():
    bundle = build_linear_scenario()
    generic = driven_rhs(bundle.system, bundle.inputs_for(7))
    rhs, _ = bundle.family(7)
    rng = np.random.default_rng(3)
    for _ in range(25):
        t = float(rng.uniform(0.0, 3.0))
        x = rng.normal(size=1) * rng.choice([0.01, 1.0, 30.0])
        assert np.allclose(rhs(t, x), generic(t, x), rtol=1e-12, atol=1e-12)


def test_fast_rhs_matches_generic_composition_sinusoid_plane():
    bundle = build_linear_scenario(
        family="sinusoid", A=[[0.0, 1.0], [-1.0, 0.0]], B=np.eye(2),
        lam=(1.0, 2.0), x0=(1.0, 0.0))
    generic = driven_rhs(bundle.system, bundle.inputs_for(4))
    rhs, _ = bundle.family(4)
    rng = np.random.default_rng(4)
    for _ in range(25):
        t = float(rng.uniform(0.0, 3.0))
        x = rng.normal(size=2)
        assert np.allclose(rhs(t, x), generic(t, x), rtol=1e-12, atol=1e-12)


def test_origin_stays_an_equilibrium_under_dither():
    for bundle in (build_linear_scenario(),
                   build_linear_scenario(family="sinusoid", lam=0.75)):
        for j in (1, 10):
            rhs, _ = bundle.family(j)
            for t in (0.0, 0.37, 1.0):
                assert np.array_equal(rhs(t, np.zeros(1)), np.zeros(1))


def test_assembled_bracket_limit_matches_input_family_gain():
    # Sinusoid coefficients are exactly +-lam, so the assembled averaged
    # system is the closed-form limit; the sawtooth pair carries the gain
    # 25/(8 pi) of its amplitude normalization instead, 0.53% below unity.
    sin = build_linear_scenario(family="sinusoid")
    ext = assemble_extended(sin.system, sin.v_limit)
    x = np.array([0.7])
    assert np.allclose(ext.rhs(0.0, x), sin.limit_rhs(0.0, x), atol=1e-12)

    saw = build_linear_scenario()
    coeffs = {tuple(I.indices): c for I, c in saw.v_limit.sample(0.0).items()}
    gain = coeffs[(1, 2)]
    assert gain == pytest.approx(25.0 / (8.0 * math.pi), rel=1e-12)
    assert coeffs[(2, 1)] == -gain
    ext = assemble_extended(saw.system, saw.v_limit)
    got = ext.rhs(0.0, x)[0]
    assert got == pytest.approx((1.0 - 2.0 * gain) * 0.7, rel=1e-10)


def test_driven_flow_tracks_the_limit_closer_at_higher_j():
    bundle = build_linear_scenario(family="sinusoid")
    report = convergence_sweep(bundle.family, bundle.limit_rhs, bundle.dist,
                               [bundle.x0], [0.0], 2.0, [5, 40], LIMIT_STEP)
    sups = {c.j: c.sup_d for c in report.cells}
    assert sups[5] == pytest.approx(1.658973, rel=1e-4)
    assert sups[40] == pytest.approx(0.525715, rel=1e-4)
    assert sups[40] < sups[5] / 3.0


def test_linear_probe_attracts_at_the_first_index():
    bundle = build_linear_scenario(js=(1,))
    report = probe_pluas(bundle.family, bundle.probe_config)
    assert report.attracted(0.5, 1) and report.attracted(0.25, 1)
    assert max(c.tail_sup for c in report.cells) == pytest.approx(
        0.0111147284929, rel=1e-6)


# ---------------------------------------------------------------------------
# Formation potential
# ---------------------------------------------------------------------------

def test_potential_value_and_gradient_for_a_stretched_pair():
    value, grad = gradient_potential([0.0, 0.0, 2.0, 0.0], [(1, 2)], [1.0])
    assert value == 2.25  # gap = 4 - 1, value = gap^2 / 4
    assert np.array_equal(grad, [-6.0, 0.0, 6.0, 0.0])


def test_potential_vanishes_on_the_witness():
    cfg = FormationScenario()
    value, grad = gradient_potential(cfg.witness, TRIANGLE, UNIT)
    assert value < 1e-30
    assert np.max(np.abs(grad)) < 1e-15


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(11)
    p = rng.normal(size=8)
    edges, targets = None, (1.0, 1.3, 0.8, 1.1, 0.9, 1.2)
    _, grad = gradient_potential(p, edges, targets)
    h = 1e-6
    for k in range(8):
        e = np.zeros(8)
        e[k] = h
        fd = (gradient_potential(p + e, edges, targets)[0]
              - gradient_potential(p - e, edges, targets)[0]) / (2.0 * h)
        assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_potential_rejects_malformed_graphs():
    with pytest.raises(ValueError, match="distinct agents"):
        gradient_potential(np.zeros(6), [(1, 1)], [1.0])
    with pytest.raises(ValueError, match="duplicate"):
        gradient_potential(np.zeros(6), [(1, 2), (2, 1)], [1.0, 1.0])
    with pytest.raises(ValueError, match="one target length per edge"):
        gradient_potential(np.zeros(6), [(1, 2)], [1.0, 2.0])
    with pytest.raises(ValueError, match="positive"):
        gradient_potential(np.zeros(6), [(1, 2)], [-1.0])


def test_set_distance_of_a_radially_scaled_triangle():
    cfg = FormationScenario()
    pts = cfg.witness.reshape(3, 2)
    scaled = (1.3 * pts).ravel()  # centroid is the origin
    d, rest = formation_set_distance(scaled, TRIANGLE, UNIT)
    assert d == pytest.approx(0.3, abs=1e-6)
    assert gradient_potential(rest, TRIANGLE, UNIT)[0] < 1e-14


def test_infeasible_targets_are_rejected():
    # A complete graph on four agents cannot have all six distances equal.
    with pytest.raises(ValueError, match="infeasible"):
        FormationScenario(N=4)
    with pytest.raises(ValueError, match="infeasible"):
        FormationScenario(witness=[0.0, 0.0, 2.0, 0.0, 4.0, 0.0])


def test_headings_are_reduced_modulo_two_pi():
    x0 = np.zeros(9)
    x0[0::3] = FormationScenario().witness[0::2]
    x0[1::3] = FormationScenario().witness[1::2]
    x0[2::3] = [7.0, -1.0, 0.5]
    cfg = FormationScenario(x0=x0)
    assert cfg.x0[2] == pytest.approx(7.0 - 2.0 * math.pi)
    assert cfg.x0[5] == pytest.approx(2.0 * math.pi - 1.0)
    assert cfg.x0[8] == 0.5


# ---------------------------------------------------------------------------
# Formation scenario: the gradient-flow lift
# ---------------------------------------------------------------------------

def test_default_start_sits_at_known_distance_and_level():
    bundle = build_formation_scenario()
    # Radial scaling by 1.3 stretches every side by 1.3, so the level is
    # 3/4 (1.3^2 - 1)^2 exactly and the descent distance is the offset.
    assert bundle.psi_value(bundle.x0) == pytest.approx(0.357075, rel=1e-12)
    assert bundle.extras["set_distance"](bundle.x0) == pytest.approx(
        0.3, abs=1e-6)
    d0 = bundle.e_distance(bundle.x0)
    assert d0 == pytest.approx(math.sqrt(0.357075), rel=1e-12)
    assert bundle.probe_config.epsilons == pytest.approx(
        [0.5 * d0, 0.25 * d0, 0.1 * d0])


def test_lifted_gradient_identity():
    # Summing (g_t psi) g_t + (g_p psi) g_p over the agents reproduces the
    # planar potential gradient, lifted with zero heading components.
    bundle = build_formation_scenario()
    slots = pos_slots(3)
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = rng.normal(size=9)
        lifted = np.zeros(9)
        for g_t, _g_r, g_p in bundle.extras["fields"]:
            lifted += (lie_derivative(g_t, bundle.system.psi, 0.0, x)
                       * g_t(0.0, x))
            lifted += (lie_derivative(g_p, bundle.system.psi, 0.0, x)
                       * g_p(0.0, x))
        expected = np.zeros(9)
        expected[slots] = gradient_potential(x[slots], TRIANGLE, UNIT)[1]
        assert np.allclose(lifted, expected, atol=1e-8)
        assert np.allclose(bundle.limit_rhs(0.0, x), -expected, atol=1e-8)


def test_limit_projection_matches_planar_descent_and_freezes_headings():
    bundle = build_formation_scenario()
    slots = pos_slots(3)
    traj = integrate(bundle.limit_rhs, 0.0, bundle.x0, 2.0, LIMIT_STEP)

    def planar(t, p):
        return -gradient_potential(p, TRIANGLE, UNIT)[1]

    ref = integrate(planar, 0.0, bundle.x0[slots], 2.0, LIMIT_STEP)
    assert traj.completed and ref.completed
    assert np.max(np.abs(traj.states[:, slots] - ref.states)) < 1e-6
    assert np.array_equal(traj.states[:, 2::3],
                          np.tile(bundle.x0[2::3], (len(traj.grid), 1)))


def test_limit_is_stationary_on_the_target_set():
    bundle = build_formation_scenario()
    cfg = bundle.extras["config"]
    x = np.zeros(9)
    x[0::3] = cfg.witness[0::2]
    x[1::3] = cfg.witness[1::2]
    x[2::3] = [0.3, 2.0, 4.0]
    assert np.max(np.abs(bundle.limit_rhs(0.0, x))) < 1e-12


def test_potential_decreases_strictly_along_the_limit():
    bundle = build_formation_scenario()
    traj = integrate(bundle.limit_rhs, 0.0, bundle.x0, 4.0, LIMIT_STEP)
    vals = np.array([bundle.psi_value(s) for s in traj.states])
    live = vals > 1e-12  # below that the flow sits in round-off
    assert np.all(np.diff(vals[live]) < 0.0)


def test_formation_fast_rhs_matches_generic_composition():
    bundle = build_formation_scenario()
    generic = driven_rhs(bundle.system, bundle.inputs_for(2))
    rhs, _ = bundle.family(2)
    rng = np.random.default_rng(5)
    for _ in range(10):
        t = float(rng.uniform(0.0, 2.0))
        x = rng.normal(size=9)
        assert np.allclose(rhs(t, x), generic(t, x), rtol=1e-12, atol=1e-12)


def test_bracket_assembly_reproduces_the_lifted_flow_for_two_agents():
    bundle = build_formation_scenario(N=2, targets=1.0)
    ext = assemble_extended(bundle.system, bundle.v_limit)
    rng = np.random.default_rng(9)
    states = [bundle.x0] + [rng.normal(size=6) for _ in range(3)]
    for t in (0.0, 0.4):
        for x in states:
            assert np.allclose(ext.rhs(t, x), bundle.limit_rhs(t, x),
                               rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# Rigid-motion equivariance
# ---------------------------------------------------------------------------

def test_rigid_motion_moves_positions_and_headings():
    x = np.array([1.0, 0.0, 0.0,
                  0.0, 1.0, 0.5,
                  0.0, 0.0, 1.0])
    moved = rigid_motion(x, 3, angle=0.5 * math.pi, shift=(1.0, 2.0))
    assert np.allclose(moved[:3], [1.0, 3.0, 0.5 * math.pi], atol=1e-15)
    assert np.allclose(moved[3:6], [0.0, 2.0, 0.5 + 0.5 * math.pi],
                       atol=1e-15)
    only_two = rigid_motion(x, 3, shift=(1.0, 0.0), agents=[2])
    assert np.array_equal(only_two[:3], x[:3])
    assert np.array_equal(only_two[6:], x[6:])
    assert only_two[3] == 1.0


def test_flow_commutes_with_rigid_motions_of_all_agents():
    bundle = build_formation_scenario()
    assert rotation_invariance_check(bundle, 0.7, (0.4, -0.2)) < 1e-9
    assert rotation_invariance_check(bundle, 0.7, (0.4, -0.2),
                                     j=3, T=1.0) < 1e-9


def test_moving_a_single_agent_breaks_the_symmetry():
    bundle = build_formation_scenario()
    dev = rotation_invariance_check(bundle, 0.7, (0.4, -0.2), agents=[1])
    assert dev > 0.05


def test_rigid_motion_check_requires_a_formation_bundle():
    with pytest.raises(ValueError, match="formation bundle"):
        rotation_invariance_check(build_linear_scenario())


# ---------------------------------------------------------------------------
# Stability probes on the formation (frozen regression values)
# ---------------------------------------------------------------------------

def test_formation_probe_attraction_sharpens_with_j():
    bundle = build_formation_scenario(js=(1, 10))
    report = probe_pluas(bundle.family, bundle.probe_config)
    eps_half, eps_quarter, eps_tenth = report.epsilons
    assert report.attracted(eps_half, 1)
    assert not report.attracted(eps_tenth, 1)
    assert all(report.attracted(e, 10) for e in report.epsilons)
    assert report.j0(eps_tenth) == 10
    tails = {c.j: c.tail_sup for c in report.cells}
    assert tails[1] == pytest.approx(0.235422006496, rel=1e-6)
    assert tails[10] == pytest.approx(4.04686911e-06, rel=1e-3)
    sups = {c.j: c.sup_d for c in report.cells}
    assert sups[10] == pytest.approx(4.5798812873, rel=1e-6)


def test_formation_limit_is_exponentially_stable():
    bundle = build_formation_scenario()
    config = dataclasses.replace(bundle.probe_config, js=[1])
    report = probe_lues(bundle.limit_factory, config)
    assert report.exponential(1)
    lam, mu = report.envelope(1)
    assert lam == 1.0  # raw intercept fit sits below the start, so clamped
    assert mu == pytest.approx(6.0398, abs=1e-3)
    assert report.j0_exponential() == 1
    fit = report.cells[0].fit
    assert fit.residual == pytest.approx(0.06522860048, rel=1e-4)


def test_unicycle_fields_move_single_agents():
    (g_t, g_r, g_p), (g_t2, _, _) = unicycle_fields(2)
    x = np.array([0.0, 0.0, 0.3, 1.0, 1.0, 2.0])
    assert np.allclose(g_t(0.0, x),
                       [math.cos(0.3), math.sin(0.3), 0, 0, 0, 0])
    assert np.allclose(g_p(0.0, x),
                       [-math.sin(0.3), math.cos(0.3), 0, 0, 0, 0])
    assert np.array_equal(g_r(0.0, x), [0, 0, 1, 0, 0, 0])
    assert np.allclose(g_t2(0.0, x),
                       [0, 0, 0, math.cos(2.0), math.sin(2.0), 0])
