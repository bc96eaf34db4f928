"""Tests for the stability probes and exponential envelope fits.

Fits are validated on synthetic exact data (must recover rates to machine
precision), the probes on closed-form flows where every verdict is known,
and the negative control on a cubic-potential flow whose algebraic decay
must defeat the exponential-envelope verdict while practical attraction
still passes.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bracketflow.input_signals import make_sawtooth_inputs
from bracketflow.simulator import periodic_step, driven_rhs
from bracketflow.stability_lab import (
    DEFAULT_FIT_RESIDUAL_MAX,
    StabilityProbeConfig,
    ball_starts,
    fit_exponential,
    probe_lues,
    probe_pluas,
)
from bracketflow.vector_fields import ControlAffineSystem, ScalarField, constant_field, linear_field


def origin_distance(x):
    return float(np.linalg.norm(x))


def decay_factory(j):
    return (lambda t, x: -x), 0.01


def scalar_quadratic_system():
    e = constant_field([1.0])
    psi = ScalarField(1, lambda t, xs: xs[0] * xs[0])
    return ControlAffineSystem(1, [e, e], drift=linear_field([[1.0]]),
                               psi=psi, shapes=["hs", "hc"])


def sawtooth_factory(sys):
    def factory(j):
        return driven_rhs(sys, make_sawtooth_inputs(j)), periodic_step(1.0 / j)

    return factory


# ---------------------------------------------------------------------------
# fit_exponential
# ---------------------------------------------------------------------------

def test_fit_recovers_unit_decay():
    ts = np.linspace(0.0, 5.0, 200)
    fit = fit_exponential(ts, np.exp(-ts))
    assert fit.lam == pytest.approx(1.0, rel=1e-9)
    assert fit.mu == pytest.approx(1.0, rel=1e-9)
    assert fit.residual < 1e-12
    assert fit.envelope_ok
    assert not fit.converged


def test_fit_recovers_scaled_decay():
    # an overshooting trajectory: starts at distance 1 but rides 2 e^{-3t}
    ts = np.linspace(0.0, 3.0, 120)
    fit = fit_exponential(ts, 2.0 * np.exp(-3.0 * ts), d0=1.0)
    assert fit.lam == pytest.approx(2.0, rel=1e-9)
    assert fit.mu == pytest.approx(3.0, rel=1e-9)


@given(st.floats(0.2, 5.0), st.floats(0.1, 4.0), st.floats(0.5, 3.0))
@settings(max_examples=60, deadline=None)
def test_fit_recovery_is_exact_on_synthetic_data(lam, mu, d0):
    ts = np.linspace(0.0, 4.0, 150)
    fit = fit_exponential(ts, lam * d0 * np.exp(-mu * ts), d0=d0)
    assert fit.mu == pytest.approx(mu, rel=1e-6)
    assert fit.lam == pytest.approx(lam, rel=1e-6)


def test_fit_exact_when_data_matches_reference_scale():
    # d(t) = d0 * lam * e^{-mu t} with d(0) = d0 requires lam = 1
    for mu in (0.3, 1.7):
        ts = np.linspace(0.0, 6.0, 300)
        fit = fit_exponential(ts, 0.8 * np.exp(-mu * ts))
        assert fit.lam == pytest.approx(1.0, rel=1e-6)
        assert fit.mu == pytest.approx(mu, rel=1e-6)
        assert fit.residual < 1e-10


def test_fit_envelope_tolerates_bounded_ripple():
    # 5% multiplicative ripple stays below the widened (1.05, 0.95) bound
    ts = np.linspace(0.0, 4.0, 400)
    dists = np.exp(-ts) * (1.0 + 0.05 * np.sin(40.0 * ts))
    fit = fit_exponential(ts, dists)
    assert fit.envelope_ok
    assert fit.mu == pytest.approx(1.0, abs=0.05)


def test_fit_envelope_rejects_localized_excursion():
    # a brief 50% spike barely moves the rms residual but pokes above the
    # widened bound — envelope_ok is the check that catches it
    ts = np.linspace(0.0, 6.0, 1200)
    dists = np.exp(-ts) * (1.0 + 0.5 * np.exp(-(((ts - 3.0) / 0.15) ** 2)))
    fit = fit_exponential(ts, dists, d0=1.0)
    assert fit.residual < DEFAULT_FIT_RESIDUAL_MAX
    assert not fit.envelope_ok
    assert not fit.valid(DEFAULT_FIT_RESIDUAL_MAX)


def test_fit_all_samples_below_floor_reports_converged():
    ts = np.linspace(0.0, 1.0, 50)
    fit = fit_exponential(ts, np.full(50, 1e-12))
    assert fit.converged
    assert fit.lam == 0.0
    assert math.isinf(fit.mu)
    assert fit.valid(0.25)


def test_fit_ignores_floored_tail():
    # the hockey-stick tail at numerical zero must not bias the rate
    ts = np.linspace(0.0, 40.0, 2001)
    fit = fit_exponential(ts, np.maximum(np.exp(-ts), 1e-300))
    assert fit.mu == pytest.approx(1.0, rel=1e-6)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_exponential([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        fit_exponential([0.0, 1.0], [1.0, -0.5])


def test_fit_growing_distance_gives_negative_rate():
    ts = np.linspace(0.0, 2.0, 100)
    fit = fit_exponential(ts, 0.1 * np.exp(0.8 * ts))
    assert fit.mu == pytest.approx(-0.8, rel=1e-9)


# ---------------------------------------------------------------------------
# Config validation and start sampling
# ---------------------------------------------------------------------------

def base_config(**overrides):
    kwargs = dict(e_distance=origin_distance, delta=1.0,
                  epsilons=[0.5, 0.1], T=4.0, t0_list=[0.0], js=[1],
                  x0_list=[np.array([1.0])])
    kwargs.update(overrides)
    return StabilityProbeConfig(**kwargs)


def test_config_validates_parameters():
    with pytest.raises(ValueError):
        base_config(delta=0.0)
    with pytest.raises(ValueError):
        base_config(T=-1.0)
    with pytest.raises(ValueError):
        base_config(epsilons=[])
    with pytest.raises(ValueError):
        base_config(epsilons=[0.1, -0.2])
    with pytest.raises(ValueError):
        base_config(horizon=2.0)  # shorter than the deadline
    with pytest.raises(ValueError):
        base_config(x0_list=[])


def test_config_rejects_starts_outside_ball():
    with pytest.raises(ValueError, match="delta-ball"):
        base_config(x0_list=[np.array([1.5])])


def test_config_default_horizon_covers_tail():
    cfg = base_config()
    assert cfg.horizon == pytest.approx(1.25 * cfg.T)


def test_ball_starts_lie_on_spheres():
    starts = ball_starts([1.0, -2.0], 0.3)
    assert len(starts) == 2 * (2 * 2 + 1)
    center = np.array([1.0, -2.0])
    radii = sorted({round(float(np.linalg.norm(s - center)), 12)
                    for s in starts})
    assert radii == [0.15, 0.3]


# ---------------------------------------------------------------------------
# probe_pluas
# ---------------------------------------------------------------------------

def test_pluas_exact_decay_attracts_at_log_deadline():
    # from the delta-ball, d(t) = d0 e^{-t}: by T = ln(delta/eps) every
    # trajectory is inside eps and stays there
    delta, eps = 1.0, 0.1
    T = math.log(delta / eps) + 0.05
    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=delta, epsilons=[0.5, eps],
        T=T, t0_list=[0.0, 1.3], js=[1, 2],
        x0_list=ball_starts([0.0, 0.0], delta))
    report = probe_pluas(decay_factory, cfg)
    for e in (0.5, eps):
        for j in (1, 2):
            assert report.attracted(e, j)
        assert report.j0(e) == 1
    # stability over the whole window holds only from the ball radius up
    assert report.stable(1.0 + 1e-9, 1)
    assert not report.stable(0.5, 1)
    assert "pluas probe" in report.summary()


def test_pluas_monotone_in_epsilon():
    # one sup per cell serves every eps: a j passing some eps passes all
    # larger ones by construction
    cfg = base_config(epsilons=[0.05, 0.1, 0.5, 1.0], T=4.0)
    report = probe_pluas(decay_factory, cfg)
    flags = [report.attracted(eps, 1) for eps in cfg.epsilons]
    assert flags == sorted(flags)


def test_pluas_records_blowup_as_failure():
    def factory(j):
        return (lambda t, x: x * x), 0.001

    cfg = base_config(x0_list=[np.array([1.0])], T=2.0)
    report = probe_pluas(factory, cfg)
    (cell,) = report.cells
    assert not cell.complete
    assert cell.note
    assert not report.attracted(0.5, 1)
    assert report.j0(0.5) is None


def test_pluas_order_independent():
    sys = scalar_quadratic_system()
    factory = sawtooth_factory(sys)
    kwargs = dict(e_distance=origin_distance, delta=1.0,
                  epsilons=[0.5, 0.2], T=5.0, t0_list=[0.0],
                  x0_list=[np.array([1.0]), np.array([0.6])])
    fwd = probe_pluas(factory, StabilityProbeConfig(js=[1, 4], **kwargs))
    rev = probe_pluas(factory, StabilityProbeConfig(js=[4, 1], **kwargs))
    assert fwd.attracted_verdicts() == rev.attracted_verdicts()
    assert fwd.stable_verdicts() == rev.stable_verdicts()
    assert fwd.thresholds() == rev.thresholds()


def test_pluas_linear_sawtooth_attracts_at_j_one():
    # the driven scalar system contracts already at the first sequence index
    sys = scalar_quadratic_system()
    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.25],
        T=5.0, t0_list=[0.0], js=[1],
        x0_list=[np.array([1.0]), np.array([-1.0]), np.array([0.5])])
    report = probe_pluas(sawtooth_factory(sys), cfg)
    assert report.attracted(0.25, 1)
    assert report.j0(0.25) == 1


def test_pluas_period_shift_invariance():
    sys = scalar_quadratic_system()
    factory = sawtooth_factory(sys)
    period = 0.25  # j = 4
    verdicts = []
    for t0 in (0.0, period):
        cfg = StabilityProbeConfig(
            e_distance=origin_distance, delta=1.0, epsilons=[0.3, 0.15],
            T=5.0, t0_list=[t0], js=[4], x0_list=[np.array([0.9])])
        verdicts.append(probe_pluas(factory, cfg).attracted_verdicts())
    assert verdicts[0] == verdicts[1]


# ---------------------------------------------------------------------------
# probe_lues
# ---------------------------------------------------------------------------

def test_lues_exact_decay_certifies_unit_rate():
    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.1], T=4.0,
        t0_list=[0.0, 0.7], js=[1, 3],
        x0_list=ball_starts([0.0, 0.0, 0.0], 1.0, fractions=(1.0,)))
    report = probe_lues(decay_factory, cfg)
    for j in (1, 3):
        lam, mu = report.envelope(j)
        assert mu == pytest.approx(1.0, rel=1e-6)
        assert lam == pytest.approx(1.0, rel=1e-6)
        assert report.exponential(j)
    assert report.j0_exponential() == 1
    assert "envelope" in report.summary()


def test_lues_envelope_is_worst_case_over_cells():
    # two starts with different decay rates along different axes: the
    # envelope must quote the slower one
    def factory(j):
        return (lambda t, x: np.array([-1.0, -2.0]) * x), 0.01

    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.1], T=4.0,
        t0_list=[0.0], js=[1],
        x0_list=[np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    report = probe_lues(factory, cfg)
    lam, mu = report.envelope(1)
    assert mu == pytest.approx(1.0, rel=1e-6)


def test_lues_negative_control_minimum_plateau():
    # a potential whose minimum set is a plateau of radius 0.2 around the
    # target point: trajectories park on the plateau edge, so the distance
    # flattens at 0.2 and no exponential envelope toward the point exists —
    # verdict negative, while practical attraction passes for targets
    # looser than the plateau
    def factory(j):
        return (lambda t, x: -(x - 0.2 * np.sign(x)) * (np.abs(x) > 0.2)), 0.01

    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.1, 0.25], T=8.0,
        horizon=40.0, t0_list=[0.0], js=[1], x0_list=[np.array([1.0])])
    lues = probe_lues(factory, cfg)
    assert not lues.exponential(1)
    assert lues.j0_exponential() is None
    pluas = probe_pluas(factory, cfg)
    assert pluas.attracted(0.25, 1)       # plateau sits inside the 0.25 ball
    assert not pluas.attracted(0.1, 1)    # but never reaches 0.1


def test_lues_driven_scalar_rate_near_unity():
    # deep in the averaging regime the driven flow inherits the averaged
    # contraction rate (up to ripple): mu within 20% of 1
    sys = scalar_quadratic_system()
    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.2], T=5.0,
        t0_list=[0.0], js=[100], x0_list=[np.array([1.0])],
        fit_residual_max=0.5)
    report = probe_lues(sawtooth_factory(sys), cfg)
    env = report.envelope(100)
    assert env is not None
    assert env[1] == pytest.approx(1.0, abs=0.2)
    # the least-squares line undershoots the start (ripple pulls it down);
    # the certified envelope clamps the prefactor at one to cover d(t0)
    fit = report.cells_for(100)[0].fit
    assert fit.lam < 1.0
    assert env[0] == pytest.approx(fit.effective_lam)


def test_lues_withholds_rate_when_fit_is_loose():
    # same algebraic-decay data, but the accessor must return None rather
    # than a number that the residual threshold disowns
    def factory(j):
        return (lambda t, x: -x ** 3), 0.01

    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.25], T=8.0,
        horizon=10.0, t0_list=[0.0], js=[1], x0_list=[np.array([1.0])],
        fit_residual_max=0.05)
    report = probe_lues(factory, cfg)
    assert report.envelope(1) is None


def test_lues_converged_cells_pass_without_rate():
    # start exactly on the target: distance is numerically zero throughout
    cfg = StabilityProbeConfig(
        e_distance=origin_distance, delta=1.0, epsilons=[0.1], T=2.0,
        t0_list=[0.0], js=[1], x0_list=[np.array([0.0])])
    report = probe_lues(decay_factory, cfg)
    lam, mu = report.envelope(1)
    assert lam == 0.0
    assert math.isinf(mu)
    assert report.exponential(1)


def test_report_csv_format(tmp_path):
    cfg = base_config(T=2.0)
    report = probe_lues(decay_factory, cfg)
    path = tmp_path / "stability.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    header = ("j,t0,x0_1,d0,sup_d,tail_sup,lam_hat,mu_hat,fit_residual,"
              "envelope_ok,complete")
    assert lines[0] == header
    assert len(lines) == 2
    fields = lines[1].split(",")
    assert fields[0] == "1"
    assert fields[-1] == "1"
