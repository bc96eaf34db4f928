"""Empirical stability probes over (t0, x0, j) grids.

Two notions are probed along simulated trajectories, both relative to a
target set E given as a distance callable x -> d(x, E):

* practical attraction — for each tolerance eps, does every trajectory from
  the delta-ball reach and stay inside the eps-tube by the deadline T?
* exponential stability — does one uniform envelope lam * d0 * exp(-mu t)
  (the worst fitted lam, the slowest fitted mu, widened by a 5% margin)
  dominate every trajectory's distance curve?

These are sampling probes, not proofs: the underlying definitions quantify
over all initial times and a full ball of states, which no finite grid can
exhaust.  The probes therefore report verdicts per (j, eps) plus the first
sequence index from which a verdict holds, never certified constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .simulator import integrate

DEFAULT_DISTANCE_FLOOR = 1e-9   # below this a distance counts as converged
ENVELOPE_LAM_MARGIN = 1.05
ENVELOPE_MU_MARGIN = 0.95
# A log-space RMS residual of 0.1 means the fitted envelope describes the
# data to within ~10% typical multiplicative deviation.  Exponential decay
# with bounded oscillatory ripple sits well under this; a distance curve
# that flattens out (non-isolated minima) or decays algebraically does not.
DEFAULT_FIT_RESIDUAL_MAX = 0.1


# ---------------------------------------------------------------------------
# Exponential fits
# ---------------------------------------------------------------------------

@dataclass
class ExponentialFit:
    """Least-squares fit d(t) ~ lam * d0 * exp(-mu (t - t0)) in log space.

    `converged` marks the degenerate case where (almost) all samples sit at
    or below the distance floor — there is no slope information, but the
    trajectory is as stable as the probe can resolve.  `envelope_ok` records
    whether the margin-widened bound (lam*1.05, mu*0.95) dominates every
    sample, which is the uniformity check the verdicts build on.
    """
    lam: float
    mu: float
    residual: float
    n_samples: int
    converged: bool = False
    envelope_ok: bool = False

    @property
    def effective_lam(self):
        """Certifiable prefactor: an exponential bound must cover its own
        initial condition (d(t0) = d0 demands lam >= 1), so the envelope
        uses the intercept-derived lam clamped from below at one."""
        return max(self.lam, 1.0)

    def valid(self, residual_max):
        """A fit carries a trustworthy rate when it is a genuine regression
        (not a converged stub), tight in log space, and its envelope holds."""
        return (self.converged
                or (self.residual <= residual_max and self.envelope_ok
                    and self.n_samples >= 3))


def fit_exponential(times, dists, d0=None, floor=DEFAULT_DISTANCE_FLOOR):
    """Fit lam, mu, and the log-space RMS residual to a distance curve.

    `d0` is the reference scale the prefactor is measured against — the
    distance of the start to the target set.  It defaults to the first
    sample (the natural choice along a trajectory) but may exceed it, in
    which case lam absorbs the transient overshoot.  Samples at or below
    `floor` carry no information (they are numerical zero: a distance that
    truly decays exponentially bottoms out at the round-off plateau of the
    distance function, which would poke above any decaying bound) and are
    excluded from both the regression and the envelope check; when fewer
    than two samples survive, the curve is reported as converged with no
    rate.  The envelope check asks whether the margin-widened bound with
    the clamped prefactor, 1.05 * max(lam, 1) * d0 * exp(-0.95 * mu *
    (t - t0)), dominates every above-floor sample.
    """
    times = np.asarray(times, dtype=float)
    dists = np.asarray(dists, dtype=float)
    if times.shape != dists.shape or times.ndim != 1:
        raise ValueError("times and distances must be matching 1-d arrays")
    if np.any(dists < 0.0):
        raise ValueError("distances must be nonnegative")
    t0 = times[0]
    if d0 is None:
        d0 = float(dists[0])
    d0 = max(float(d0), floor)
    mask = dists > floor
    if mask.sum() < 2:
        return ExponentialFit(lam=0.0, mu=math.inf, residual=0.0,
                              n_samples=int(mask.sum()), converged=True,
                              envelope_ok=True)
    ts = times[mask] - t0
    logs = np.log(dists[mask])
    slope, intercept = np.polyfit(ts, logs, 1)
    mu = -float(slope)
    lam = float(math.exp(intercept) / d0)
    residual = float(np.sqrt(np.mean((logs - (intercept + slope * ts)) ** 2)))
    bound = (ENVELOPE_LAM_MARGIN * max(lam, 1.0) * d0
             * np.exp(-ENVELOPE_MU_MARGIN * mu * ts))
    envelope_ok = bool(np.all(dists[mask] <= bound + 1e-15))
    return ExponentialFit(lam=lam, mu=mu, residual=residual,
                          n_samples=int(mask.sum()), envelope_ok=envelope_ok)


# ---------------------------------------------------------------------------
# Probe configuration and report
# ---------------------------------------------------------------------------

@dataclass
class StabilityProbeConfig:
    """Grid description for the stability probes.

    `e_distance` evaluates d(x, E); `x0_list` are the sampled starts, each
    required to lie within the delta-ball of E; `T` is the attraction
    deadline and `horizon` the simulated window (default 1.25 T, so "stays
    inside after T" is checked on a genuine tail, not a single endpoint).
    """
    e_distance: object
    delta: float
    epsilons: list
    T: float
    t0_list: list
    js: list
    x0_list: list
    horizon: float = None
    fit_residual_max: float = DEFAULT_FIT_RESIDUAL_MAX
    floor: float = DEFAULT_DISTANCE_FLOOR

    def __post_init__(self):
        if self.delta <= 0.0 or self.T <= 0.0:
            raise ValueError("delta and T must be positive")
        if not self.epsilons or any(e <= 0.0 for e in self.epsilons):
            raise ValueError("need positive tolerance targets")
        if self.horizon is None:
            self.horizon = 1.25 * self.T
        if self.horizon < self.T:
            raise ValueError("horizon must reach the attraction deadline")
        if not self.x0_list:
            raise ValueError("need at least one start")
        for x0 in self.x0_list:
            d = float(self.e_distance(np.asarray(x0, dtype=float)))
            if d > self.delta * (1.0 + 1e-6):
                raise ValueError(
                    f"start at distance {d:g} lies outside the "
                    f"delta-ball (delta = {self.delta:g})")


def ball_starts(center, delta, fractions=(1.0, 0.5)):
    """Deterministic starts on spheres around a point target: all +-delta
    axis points plus one diagonal, repeated at the given radius fractions."""
    center = np.asarray(center, dtype=float)
    n = len(center)
    starts = []
    for frac in fractions:
        r = frac * delta
        for k in range(n):
            for sign in (+1.0, -1.0):
                x = center.copy()
                x[k] += sign * r
                starts.append(x)
        starts.append(center + r / math.sqrt(n) * np.ones(n))
    return starts


@dataclass
class StabilityCell:
    """One (j, t0, x0) probe: distance extremes and the exponential fit."""
    j: int
    t0: float
    x0: np.ndarray
    d0: float
    sup_d: float
    tail_sup: float
    fit: ExponentialFit
    complete: bool
    note: str = ""


@dataclass
class StabilityReport:
    """Per-j verdict matrix over the tolerance targets, plus rate envelopes."""
    kind: str
    js: list
    epsilons: list
    T: float
    fit_residual_max: float
    cells: list = field(default_factory=list)

    def cells_for(self, j):
        return [c for c in self.cells if c.j == j]

    # -- practical verdicts -------------------------------------------------

    def stable(self, eps, j):
        """All trajectories at this j stay within eps for the whole window."""
        cells = self.cells_for(j)
        return bool(cells) and all(c.complete and c.sup_d <= eps
                                   for c in cells)

    def attracted(self, eps, j):
        """All trajectories at this j sit within eps from the deadline on."""
        cells = self.cells_for(j)
        return bool(cells) and all(c.complete and c.tail_sup <= eps
                                   for c in cells)

    def stable_verdicts(self):
        return {eps: {j: self.stable(eps, j) for j in self.js}
                for eps in self.epsilons}

    def attracted_verdicts(self):
        return {eps: {j: self.attracted(eps, j) for j in self.js}
                for eps in self.epsilons}

    def j0(self, eps):
        """Smallest listed j whose attraction verdict is positive."""
        for j in sorted(self.js):
            if self.attracted(eps, j):
                return j
        return None

    def thresholds(self):
        return {eps: self.j0(eps) for eps in self.epsilons}

    # -- exponential verdicts ----------------------------------------------

    def envelope(self, j):
        """Uniform (lam, mu) for this j: worst lam, slowest mu over the grid.

        None when any fit is untrustworthy (rates are only reported when
        every cell's regression is tight and margin-dominating); converged
        cells pass without contributing a rate.
        """
        cells = self.cells_for(j)
        if not cells or not all(c.complete for c in cells):
            return None
        fits = [c.fit for c in cells if c.fit is not None]
        if len(fits) != len(cells):
            return None
        if not all(f.valid(self.fit_residual_max) for f in fits):
            return None
        rates = [f for f in fits if not f.converged]
        if not rates:
            return (0.0, math.inf)
        return (max(f.effective_lam for f in rates), min(f.mu for f in rates))

    def exponential(self, j):
        """True when one positive-rate envelope covers the whole grid."""
        env = self.envelope(j)
        return env is not None and env[1] > 0.0

    def exponential_verdicts(self):
        return {j: self.exponential(j) for j in self.js}

    def j0_exponential(self):
        """First listed j from which the envelope verdict holds onward."""
        ordered = sorted(self.js)
        for k, j in enumerate(ordered):
            if all(self.exponential(jj) for jj in ordered[k:]):
                return j
        return None

    # -- output --------------------------------------------------------------

    def to_csv(self, path):
        nx = len(self.cells[0].x0) if self.cells else 0
        cols = (["j", "t0"] + [f"x0_{k + 1}" for k in range(nx)]
                + ["d0", "sup_d", "tail_sup", "lam_hat", "mu_hat",
                   "fit_residual", "envelope_ok", "complete"])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for c in self.cells:
                fit = c.fit
                row = ([f"{c.j:d}", f"{c.t0:.17g}"]
                       + [f"{v:.17g}" for v in c.x0]
                       + [f"{c.d0:.17g}", f"{c.sup_d:.17g}",
                          f"{c.tail_sup:.17g}"]
                       + ([f"{fit.lam:.17g}", f"{fit.mu:.17g}",
                           f"{fit.residual:.17g}",
                           "1" if fit.envelope_ok else "0"]
                          if fit is not None else ["nan", "nan", "nan", "0"])
                       + ["1" if c.complete else "0"])
                fh.write(",".join(row) + "\n")

    def summary(self):
        lines = [f"{self.kind} probe: {len(self.cells)} cells, "
                 f"j list {sorted(self.js)}, deadline T = {self.T:g}"]
        for eps in self.epsilons:
            j0 = self.j0(eps)
            verdicts = " ".join(
                f"j={j}:{'+' if self.attracted(eps, j) else '-'}"
                for j in sorted(self.js))
            lines.append(f"  eps = {eps:g}: attracted {verdicts}   "
                         f"j0 = {j0 if j0 is not None else '-'}")
        if self.kind == "lues":
            for j in sorted(self.js):
                env = self.envelope(j)
                if env is None:
                    lines.append(f"  j={j}: no uniform envelope")
                else:
                    lines.append(f"  j={j}: envelope lam <= {env[0]:.4g}, "
                                 f"mu >= {env[1]:.4g}")
            j0 = self.j0_exponential()
            lines.append(f"  exponential from j0 = "
                         f"{j0 if j0 is not None else '-'}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------

def _distance_series(config, traj):
    try:
        vals = np.asarray(config.e_distance(traj.states), dtype=float)
        if vals.shape == (len(traj.grid),):
            return vals
    except Exception:
        pass
    return np.array([float(config.e_distance(x)) for x in traj.states])


def _run_grid(factory, config):
    cells = []
    for j in sorted(config.js):
        made = factory(j)
        rhs, h = made[0], made[1]
        nudge = made[2] if len(made) > 2 else 1e-9
        for t0 in config.t0_list:
            for x0 in config.x0_list:
                x0 = np.asarray(x0, dtype=float)
                traj = integrate(rhs, t0, x0, config.horizon, h,
                                 stage_nudge=nudge)
                d0 = float(config.e_distance(x0))
                if not traj.completed:
                    cells.append(StabilityCell(
                        j=j, t0=float(t0), x0=x0, d0=d0, sup_d=math.inf,
                        tail_sup=math.inf, fit=None, complete=False,
                        note=traj.reason))
                    continue
                dists = _distance_series(config, traj)
                tail = dists[traj.grid >= t0 + config.T - 1e-12]
                fit = fit_exponential(traj.grid, dists, d0=d0,
                                      floor=config.floor)
                cells.append(StabilityCell(
                    j=j, t0=float(t0), x0=x0, d0=d0,
                    sup_d=float(dists.max()),
                    tail_sup=float(tail.max()) if len(tail) else math.inf,
                    fit=fit, complete=True))
    return cells


def probe_pluas(factory, config):
    """Practical-attraction probe: per (j, eps) verdicts and thresholds.

    `factory(j)` returns the driven right-hand side and its step, as in the
    convergence sweep.  Blow-ups are recorded as failed cells, never raised.
    """
    report = StabilityReport(kind="pluas", js=sorted(config.js),
                             epsilons=list(config.epsilons), T=config.T,
                             fit_residual_max=config.fit_residual_max)
    report.cells = _run_grid(factory, config)
    return report


def probe_lues(factory, config):
    """Exponential-envelope probe: uniform (lam, mu) verdicts per j."""
    report = StabilityReport(kind="lues", js=sorted(config.js),
                             epsilons=list(config.epsilons), T=config.T,
                             fit_residual_max=config.fit_residual_max)
    report.cells = _run_grid(factory, config)
    return report
