"""Batch runner: scenario configs in, CSV and plot-data artifacts out.

``bracketflow run <config>`` loads a YAML (or JSON) configuration naming a
scenario and a list of experiments, executes them, and writes the results to
the configured output directory: one CSV per experiment, plot-ready columnar
``.dat`` files with ``#`` header lines, and a ``manifest.json`` recording the
config hash, the effective tolerances, and per-experiment verdicts.  The
manifest carries the only timestamp; every other artifact is a deterministic
function of the config, so two runs of the same file produce bit-identical
CSV bodies.  All floating-point output uses 17 significant digits and
round-trips exactly.

Configs are self-describing: horizons are in seconds, angles in radians, and
experiments that integrate must state their horizon explicitly — there is no
default physical time window to inherit by accident.

Exit codes: 0 success, 1 experiment failure or violated invariant (named in
the manifest), 2 config parse error, 3 config validation error.  Parse and
validation failures leave no output files behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .free_algebra import check_algebraic_identity
from .input_signals import (
    check_frequency_properties,
    closed_form_sinusoid_gd,
    gd_sweep,
    integrate_generalized_difference,
    make_sinusoid_inputs,
    sawtooth_gd_family,
    sawtooth_limit_coefficients,
    sinusoid_gd_family,
    unicycle_gd_family,
    unicycle_limit_table,
)
from .scenarios import build_scenario, list_scenarios
from .simulator import (
    convergence_sweep,
    driven_rhs,
    integral_expansion_residual,
    integrate,
)
from .stability_lab import fit_exponential, probe_lues, probe_pluas
from .vector_fields import ScalarField, increasing_trees, verify_magic_bracket

OUTPUT_ROOT_ENV = "BRACKETFLOW_OUTPUT_ROOT"
MAX_WORKERS = 8

EXIT_OK = 0
EXIT_EXPERIMENT = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3

EXPERIMENT_KINDS = ("gd-report", "converge", "pluas", "lues",
                    "brackets-verify", "freq-check", "expansion-residual")

BRACKET_METHODS = {"analytic": "jet", "fd": "fd"}
BRACKET_DEFAULT_TOL = {"analytic": 1e-6, "fd": 1e-3}


class ConfigError(Exception):
    """Structurally valid file, semantically unusable config (exit 3)."""


class ParseError(Exception):
    """Unreadable or unparseable config file (exit 2)."""


def f17(x):
    """17-significant-digit decimal, the round-trip-exact output format."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Config loading and validation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Validated run description: scenario, experiments, output plumbing."""
    scenario_name: str
    scenario_params: dict
    experiments: list
    output_dir: Path
    seed: int
    workers: int
    config_sha256: str
    config_path: str


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return mapping[key]


def _as_positive_float(value, where):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if not math.isfinite(out) or out <= 0.0:
        raise ConfigError(f"{where}: must be a positive finite number")
    return out


def _as_j_list(value, where):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{where}: 'js' must be a non-empty list")
    js = []
    for v in value:
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{where}: sequence indices must be integers "
                              f">= 1, got {v!r}")
        js.append(v)
    return js


def _validate_experiment(spec, idx):
    where = f"experiments[{idx}]"
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: each experiment must be a mapping")
    kind = _require(spec, "kind", where)
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"{where}: unknown experiment kind {kind!r}; "
                          f"expected one of {', '.join(EXPERIMENT_KINDS)}")
    out = dict(spec)
    out["label"] = str(spec.get("label", f"{kind.replace('-', '_')}_{idx}"))
    if kind in ("gd-report", "converge", "pluas", "lues"):
        out["js"] = _as_j_list(_require(spec, "js", where), where)
    if kind in ("converge", "pluas", "lues"):
        # integration experiments must state their physical window
        out["horizon"] = _as_positive_float(
            _require(spec, "horizon", where), f"{where}.horizon")
    if kind == "lues":
        target = spec.get("target", "driven")
        if target not in ("driven", "limit"):
            raise ConfigError(f"{where}: target must be 'driven' or 'limit'")
        out["target"] = target
    if kind in ("pluas", "lues") and "epsilons" in spec:
        eps = spec["epsilons"]
        if not isinstance(eps, (list, tuple)) or not eps:
            raise ConfigError(f"{where}: epsilons must be a non-empty list")
        out["epsilons"] = [_as_positive_float(e, f"{where}.epsilons")
                           for e in eps]
    if kind == "gd-report" and "slope_targets" in spec:
        targets = spec["slope_targets"]
        if not isinstance(targets, dict):
            raise ConfigError(f"{where}: slope_targets must map order to "
                              "expected slope")
        if len(out["js"]) < 2:
            raise ConfigError(f"{where}: slope checks need at least two j "
                              "values")
        out["slope_targets"] = {int(k): float(v) for k, v in targets.items()}
        out["slope_tol"] = _as_positive_float(
            spec.get("slope_tol", 0.1), f"{where}.slope_tol")
    if kind == "brackets-verify":
        method = spec.get("method", "analytic")
        if method not in BRACKET_METHODS:
            raise ConfigError(f"{where}: method must be 'analytic' or 'fd'")
        out["method"] = method
        rng = spec.get("psi_range", [0.01, 10.0])
        if (not isinstance(rng, (list, tuple)) or len(rng) != 2
                or not 0.0 < float(rng[0]) < float(rng[1])):
            raise ConfigError(f"{where}: psi_range must be [lo, hi] with "
                              "0 < lo < hi")
        out["psi_range"] = [float(rng[0]), float(rng[1])]
        points = spec.get("points", 100)
        if not isinstance(points, int) or points < 2:
            raise ConfigError(f"{where}: points must be an integer >= 2")
        out["points"] = points
        out["tolerance"] = _as_positive_float(
            spec.get("tolerance", BRACKET_DEFAULT_TOL[method]),
            f"{where}.tolerance")
    if kind == "freq-check" and "agents" in spec:
        agents = spec["agents"]
        if not isinstance(agents, int) or not 1 <= agents <= 4:
            raise ConfigError(f"{where}: agents must be an integer in 1..4")
    if kind == "expansion-residual":
        j = _require(spec, "j", where)
        if not isinstance(j, int) or j < 1:
            raise ConfigError(f"{where}: j must be an integer >= 1")
        out["horizon"] = _as_positive_float(
            _require(spec, "horizon", where), f"{where}.horizon")
        halvings = spec.get("halvings", 1)
        if not isinstance(halvings, int) or not 0 <= halvings <= 3:
            raise ConfigError(f"{where}: halvings must be an integer in 0..3")
        out["halvings"] = halvings
        out["tolerance"] = _as_positive_float(
            spec.get("tolerance", 1e-3), f"{where}.tolerance")
        out["shrink_min"] = _as_positive_float(
            spec.get("shrink_min", 8.0), f"{where}.shrink_min")
    return out


def load_config(path):
    """Read, parse, and validate a run config.

    Raises ParseError for unreadable files or broken YAML/JSON syntax and
    ConfigError for structurally parsed but semantically invalid content.
    """
    try:
        raw_bytes = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(raw_bytes)
    except yaml.YAMLError as exc:
        raise ParseError(f"config {path} does not parse: {exc}") from None

    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"scenario", "experiments", "output_dir", "seed", "workers"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")

    scenario = _require(raw, "scenario", "config")
    if isinstance(scenario, str):
        scenario = {"name": scenario}
    if not isinstance(scenario, dict):
        raise ConfigError("scenario must be a name or a mapping")
    name = _require(scenario, "name", "scenario")
    if name not in list_scenarios():
        raise ConfigError(f"unknown scenario {name!r}; available: "
                          f"{', '.join(sorted(list_scenarios()))}")
    params = scenario.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("scenario.params must be a mapping")

    experiments = _require(raw, "experiments", "config")
    if not isinstance(experiments, list) or not experiments:
        raise ConfigError("experiments must be a non-empty list")
    experiments = [_validate_experiment(spec, i)
                   for i, spec in enumerate(experiments)]
    labels = [e["label"] for e in experiments]
    if len(set(labels)) != len(labels):
        raise ConfigError("experiment labels must be unique")

    out_dir = _require(raw, "output_dir", "config")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir must be a non-empty path string")
    out_path = Path(out_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out_path.is_absolute():
        out_path = Path(root) / out_path

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or not 1 <= workers <= MAX_WORKERS:
        raise ConfigError(f"workers must be an integer in 1..{MAX_WORKERS}")

    probe = out_path
    while not probe.exists():
        parent = probe.parent
        if parent == probe:
            break
        probe = parent
    if probe.exists() and not os.access(probe, os.W_OK):
        raise ConfigError(f"output directory {out_path} is not writable")

    return RunConfig(
        scenario_name=name, scenario_params=params, experiments=experiments,
        output_dir=out_path, seed=seed, workers=workers,
        config_sha256=hashlib.sha256(raw_bytes).hexdigest(),
        config_path=str(path))


# ---------------------------------------------------------------------------
# Experiment execution
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ExperimentResult:
    kind: str
    label: str
    passed: bool
    tolerances: dict = dataclasses.field(default_factory=dict)
    verdicts: dict = dataclasses.field(default_factory=dict)
    artifacts: list = dataclasses.field(default_factory=list)  # (name, body)
    failures: list = dataclasses.field(default_factory=list)


def _panel(lines, columns, rows):
    """Columnar plot-data body: '#' headers, whitespace-separated values."""
    head = [f"# {line}" for line in lines]
    head.append("# columns: " + " ".join(columns))
    body = [" ".join(f17(v) for v in row) for row in rows]
    return "\n".join(head + body) + "\n"


def _csv(columns, rows):
    out = [",".join(columns)]
    for row in rows:
        out.append(",".join(v if isinstance(v, str) else f17(v)
                            for v in row))
    return "\n".join(out) + "\n"


def _trajectory_panel(bundle, rhs, step, t0, horizon, title):
    traj = integrate(rhs, t0, bundle.x0, horizon, step)
    if not traj.completed:
        return None, traj.reason
    cols = ["t"] + [f"x_{k + 1}" for k in range(traj.states.shape[1])]
    rows = np.column_stack([traj.grid, traj.states])
    return _panel([title, "time in seconds, angles in radians"],
                  cols, rows), None


def _run_converge(bundle, spec, ctx):
    js = spec["js"]
    horizon = spec["horizon"]
    t0_list = [float(t) for t in spec.get("t0", [0.0])]
    x0_list = ([np.asarray(x, dtype=float) for x in spec["x0"]]
               if "x0" in spec else [bundle.x0])
    limit_step = float(spec.get("limit_step", bundle.limit_factory(1)[1]))
    report = convergence_sweep(bundle.family, bundle.limit_rhs, bundle.dist,
                               x0_list, t0_list, horizon, js, limit_step)
    label = spec["label"]
    nx = len(x0_list[0])
    rows = [[c.j, c.t0, *c.x0, c.sup_d, c.b, c.ratio,
             "1" if c.complete else "0", "1" if c.violation else "0"]
            for c in report.cells]
    artifacts = [(f"{label}_sweep.csv",
                  _csv(["j", "t0"] + [f"x0_{k + 1}" for k in range(nx)]
                       + ["sup_d", "b", "ratio", "complete", "violation"],
                       rows))]
    artifacts.append((f"{label}_decay.dat", _panel(
        [f"{bundle.name}: sup-distance ratio to the averaged limit vs j",
         "log-log ready"],
        ["j", "max_ratio"],
        [[j, report.max_ratio(j)] for j in report.js])))

    failures = []
    for j in spec.get("plot_js", js):
        rhs, h = bundle.family(j)
        body, reason = _trajectory_panel(
            bundle, rhs, h, t0_list[0], horizon,
            f"{bundle.name} driven trajectory, j = {j}")
        if body is None:
            failures.append(f"trajectory j={j} incomplete: {reason}")
        else:
            artifacts.append((f"{label}_traj_j{j}.dat", body))
    body, reason = _trajectory_panel(
        bundle, bundle.limit_rhs, limit_step, t0_list[0], horizon,
        f"{bundle.name} averaged-limit trajectory")
    if body is None:
        failures.append(f"limit trajectory incomplete: {reason}")
    else:
        artifacts.append((f"{label}_traj_limit.dat", body))

    complete = all(c.complete for c in report.cells)
    if not complete:
        failures.append("incomplete sweep cells (integration aborted)")
    if report.violations:
        failures.append(f"{len(report.violations)} zero-weight cells with "
                        "nonzero deviation")
    return ExperimentResult(
        kind="converge", label=label, passed=not failures,
        tolerances={"horizon": horizon, "limit_step": limit_step},
        verdicts={"complete": complete, "monotone": report.monotone,
                  "max_ratio": {str(j): report.max_ratio(j)
                                for j in report.js}},
        artifacts=artifacts, failures=failures)


def _probe_config(bundle, spec):
    base = bundle.probe_config
    horizon = spec["horizon"]
    return dataclasses.replace(
        base, js=spec["js"], T=horizon,
        horizon=float(spec.get("window", 1.25 * horizon)),
        epsilons=[float(e) for e in spec.get("epsilons", base.epsilons)])


def _run_pluas(bundle, spec, ctx):
    config = _probe_config(bundle, spec)
    report = probe_pluas(bundle.family, config)
    label = spec["label"]
    artifacts = [(f"{label}_cells.csv", report.to_csv),
                 (f"{label}_tails.dat", _panel(
                     [f"{bundle.name}: worst tail distance vs j",
                      f"deadline T = {f17(config.T)} s"],
                     ["j", "max_tail"],
                     [[j, max(c.tail_sup for c in report.cells_for(j))]
                      for j in sorted(report.js)]))]
    failures = []
    if not all(c.complete for c in report.cells):
        failures.append("incomplete probe cells (integration aborted)")
    return ExperimentResult(
        kind="pluas", label=label, passed=not failures,
        tolerances={"T": config.T, "window": config.horizon,
                    "epsilons": list(config.epsilons)},
        verdicts={
            "attracted": {f17(eps): {str(j): report.attracted(eps, j)
                                     for j in sorted(report.js)}
                          for eps in config.epsilons},
            "j0": {f17(eps): report.j0(eps) for eps in config.epsilons},
        },
        artifacts=artifacts, failures=failures)


def _run_lues(bundle, spec, ctx):
    config = _probe_config(bundle, spec)
    factory = (bundle.limit_factory if spec.get("target") == "limit"
               else bundle.family)
    report = probe_lues(factory, config)
    label = spec["label"]
    rate_rows = []
    for j in sorted(report.js):
        env = report.envelope(j)
        if env is not None:
            rate_rows.append([j, env[0], env[1]])
    artifacts = [(f"{label}_cells.csv", report.to_csv),
                 (f"{label}_rates.dat", _panel(
                     [f"{bundle.name}: uniform exponential envelope vs j "
                      f"({spec.get('target', 'driven')} dynamics)"],
                     ["j", "lam", "mu"], rate_rows))]
    failures = []
    if not all(c.complete for c in report.cells):
        failures.append("incomplete probe cells (integration aborted)")
    return ExperimentResult(
        kind="lues", label=label, passed=not failures,
        tolerances={"T": config.T, "window": config.horizon,
                    "fit_residual_max": config.fit_residual_max},
        verdicts={
            "exponential": {str(j): report.exponential(j)
                            for j in sorted(report.js)},
            "j0_exponential": report.j0_exponential(),
            "envelopes": {str(j): list(report.envelope(j))
                          for j in sorted(report.js)
                          if report.envelope(j) is not None},
        },
        artifacts=artifacts, failures=failures)


def _gd_builder(bundle, spec):
    cfg = bundle.extras.get("config")
    window_periods = float(spec.get("window_periods", 4.0))
    if bundle.name == "formation":
        return unicycle_gd_family(bundle.extras["N"], window_periods)
    if cfg.family == "sawtooth":
        return sawtooth_gd_family(window_periods)
    return sinusoid_gd_family(cfg.omegas, cfg.lam_signals, window_periods)


def _run_gd_report(bundle, spec, ctx):
    result = gd_sweep(_gd_builder(bundle, spec), spec["js"])
    label = spec["label"]
    rows = []
    for rep in result.reports:
        for I in sorted(rep.w_sup):
            rows.append([rep.j, len(I), "".join(str(i) for i in I.indices),
                         rep.w_sup[I]])
    orders = sorted(result.w_slopes)
    decay_rows = []
    for rep in result.reports:
        decay_rows.append([rep.j] + [rep.w_sup_by_order(ell)
                                     for ell in orders])
    artifacts = [
        (f"{label}_w_sup.csv", _csv(["j", "order", "word", "sup_w"], rows)),
        (f"{label}_decay.dat", _panel(
            [f"{bundle.name}: sup|W^j| vs j per bracket order, "
             "log-log ready"],
            ["j"] + [f"order_{ell}" for ell in orders], decay_rows)),
    ]
    failures = []
    if not (result.c1_decreasing and result.c2_decreasing
            and result.c3_decreasing):
        failures.append("convergence-condition sups do not decay along the "
                        "j list")
    tolerances = {}
    if "slope_targets" in spec:
        tol = spec["slope_tol"]
        tolerances = {"slope_targets": spec["slope_targets"],
                      "slope_tol": tol}
        for order, target in spec["slope_targets"].items():
            got = result.w_slopes.get(order)
            if got is None or abs(got - target) > tol:
                failures.append(
                    f"order-{order} decay slope "
                    f"{'missing' if got is None else f17(got)} is not "
                    f"within {f17(tol)} of {f17(target)}")
    return ExperimentResult(
        kind="gd-report", label=label, passed=not failures,
        tolerances=tolerances,
        verdicts={"w_slopes": {str(k): v for k, v in result.w_slopes.items()},
                  "c3_slope": result.c3_slope,
                  "c1_decreasing": result.c1_decreasing,
                  "c2_decreasing": result.c2_decreasing,
                  "c3_decreasing": result.c3_decreasing},
        artifacts=artifacts, failures=failures)


def _detect_shape_pairs(system):
    """Channel pairs (k) whose controls carry the hs/hc shape pair."""
    pairs = []
    for k in range(1, system.m // 2 + 1):
        if (system.shape(2 * k - 1).kind == "hs"
                and system.shape(2 * k).kind == "hc"):
            pairs.append(k)
    return pairs


def _states_at_levels(bundle, levels, rng):
    """One state per requested output level, on a deterministic ray.

    The linear scenario places states on a seeded random direction (the
    output is the squared norm, so the radius is exact); the formation
    scenario scales the canonical start radially about its centroid and
    brackets each level by bisection along that ray.
    """
    if "limit_matrix" in bundle.extras:
        n = len(bundle.x0)
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        return [math.sqrt(level) * direction for level in levels]

    N = bundle.extras["N"]
    x0 = bundle.x0
    pos = np.array([k for k in range(3 * N) if k % 3 != 2])
    pts = x0[pos].reshape(N, 2)
    centroid = pts.mean(axis=0)

    def state_at(c):
        x = x0.copy()
        x[pos] = (centroid + c * (pts - centroid)).ravel()
        return x

    def level_at(c):
        return bundle.psi_value(state_at(c))

    # The output along the ray falls to its minimum (zero when the ray
    # crosses the feasible set) and then grows without bound, so each level
    # is bisected on the increasing branch right of the scanned minimum.
    scan = np.linspace(1e-3, 1.0, 257)
    c_floor = float(scan[int(np.argmin([level_at(c) for c in scan]))])
    floor_level = level_at(c_floor)

    states = []
    for level in levels:
        if level < floor_level:
            raise RuntimeError(f"output level {level:g} is below the ray "
                               f"minimum {floor_level:g}")
        lo, hi = c_floor, max(1.0, 2.0 * c_floor)
        while level_at(hi) < level:
            hi *= 2.0
            if hi > 1e6:
                raise RuntimeError("output level out of reach on the ray")
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if level_at(mid) < level:
                lo = mid
            else:
                hi = mid
        states.append(state_at(0.5 * (lo + hi)))
    return states


def _run_brackets_verify(bundle, spec, ctx):
    system = bundle.system
    pairs = spec.get("pairs") or _detect_shape_pairs(system)
    if not pairs:
        raise ValueError("scenario has no hs/hc channel pairs to verify")
    for k in pairs:
        if k not in _detect_shape_pairs(system):
            raise ValueError(f"channel pair {k} does not carry the hs/hc "
                             "shapes")
    lo, hi = spec["psi_range"]
    levels = np.geomspace(lo, hi, spec["points"])
    rng = np.random.default_rng(ctx["seed"])
    points = [(0.0, x) for x in _states_at_levels(bundle, levels, rng)]
    tol = spec["tolerance"]
    method = BRACKET_METHODS[spec["method"]]
    rows, verdicts, failures = [], {}, []
    for k in pairs:
        worst = verify_magic_bracket(system, k, points, method=method)
        ok = worst <= tol
        rows.append([k, spec["method"], len(points), lo, hi, worst, tol,
                     "1" if ok else "0"])
        verdicts[str(k)] = {"worst_residual": worst, "passed": ok}
        if not ok:
            failures.append(f"pair {k}: bracket residual {f17(worst)} "
                            f"exceeds {f17(tol)}")
    label = spec["label"]
    artifacts = [(f"{label}_residuals.csv",
                  _csv(["pair", "method", "points", "psi_min", "psi_max",
                        "worst_residual", "tolerance", "passed"], rows))]
    return ExperimentResult(
        kind="brackets-verify", label=label, passed=not failures,
        tolerances={"residual_max": tol, "method": spec["method"]},
        verdicts=verdicts, artifacts=artifacts, failures=failures)


def _run_freq_check(bundle, spec, ctx):
    agents = spec.get("agents", bundle.extras.get("N"))
    if agents is None:
        raise ValueError("freq-check needs 'agents' for non-formation "
                         "scenarios")
    report = check_frequency_properties(agents)
    label = spec["label"]
    rows = [["single_frequencies_nonresonant", str(report.prop_single)],
            ["pair_sums_nonresonant", str(report.prop_pairs)],
            ["triple_sums_nonresonant", str(report.prop_triples)],
            ["quadruple_sums_classified", str(report.prop_quadruples)]]
    for nu in sorted(report.nonpair_patterns):
        rows.append([f"nonpair_patterns_agent_{nu}",
                     str(report.nonpair_patterns[nu])])
    artifacts = [(f"{label}_properties.csv", _csv(["property", "value"],
                                                  rows))]
    failures = list(report.violations)
    props_ok = (report.prop_single and report.prop_pairs
                and report.prop_triples and report.prop_quadruples)
    if not props_ok:
        failures.append("frequency resonance properties violated")
    counts_ok = all(v == 12 for v in report.nonpair_patterns.values())
    if not counts_ok:
        failures.append("non-pair quadruple pattern count differs from 12")
    return ExperimentResult(
        kind="freq-check", label=label, passed=not failures,
        tolerances={"agents": agents},
        verdicts={"properties": props_ok,
                  "nonpair_patterns": {str(k): v for k, v
                                       in report.nonpair_patterns.items()}},
        artifacts=artifacts, failures=failures)


def _run_expansion_residual(bundle, spec, ctx):
    j = spec["j"]
    horizon = spec["horizon"]
    system = bundle.system
    n = system.n
    obs_index = spec.get("observable", 1)
    if not isinstance(obs_index, int) or not 1 <= obs_index <= n:
        raise ValueError(f"observable must be a coordinate index in 1..{n}")
    alpha = ScalarField(n, lambda t, xs: xs[obs_index - 1],
                        name=f"x_{obs_index}")
    u = bundle.inputs_for(j)
    v_j, W = bundle.gd_pair_for(j)
    rhs = driven_rhs(system, u)
    _, h0 = bundle.family(j)
    maxima, steps = [], []
    label = spec["label"]
    artifacts = []
    for level in range(spec["halvings"] + 1):
        h = h0 / (2 ** level)
        traj = integrate(rhs, 0.0, bundle.x0, horizon, h)
        if not traj.completed:
            raise ValueError(f"driven trajectory aborted: {traj.reason}")
        rep = integral_expansion_residual(system, u, W, bundle.v_limit, v_j,
                                          alpha, traj)
        maxima.append(rep.max_abs)
        steps.append(h)
        tag = "" if level == 0 else f"_half{level}"
        artifacts.append((f"{label}{tag}.dat", _panel(
            [f"{bundle.name}: integral-expansion residual of x_{obs_index} "
             f"along the driven flow, j = {j}, step = {f17(h)} s"],
            ["t", "residual"],
            np.column_stack([rep.times, rep.residuals]))))
    rows = [[steps[k], maxima[k]] for k in range(len(maxima))]
    artifacts.insert(0, (f"{label}_summary.csv",
                         _csv(["step", "max_residual"], rows)))
    failures = []
    if maxima[0] > spec["tolerance"]:
        failures.append(f"residual {f17(maxima[0])} exceeds "
                        f"{f17(spec['tolerance'])} at the default step")
    shrinks = [maxima[k] / maxima[k + 1] if maxima[k + 1] > 0 else math.inf
               for k in range(len(maxima) - 1)]
    for k, s in enumerate(shrinks):
        if s < spec["shrink_min"]:
            failures.append(f"halving {k + 1}: residual shrank only "
                            f"{f17(s)}x (need {f17(spec['shrink_min'])}x)")
    return ExperimentResult(
        kind="expansion-residual", label=label, passed=not failures,
        tolerances={"residual_max": spec["tolerance"],
                    "shrink_min": spec["shrink_min"]},
        verdicts={"max_residual": maxima[0],
                  "steps": steps, "maxima": maxima,
                  "shrink_factors": shrinks},
        artifacts=artifacts, failures=failures)


EXPERIMENTS = {
    "converge": _run_converge,
    "pluas": _run_pluas,
    "lues": _run_lues,
    "gd-report": _run_gd_report,
    "brackets-verify": _run_brackets_verify,
    "freq-check": _run_freq_check,
    "expansion-residual": _run_expansion_residual,
}


def _execute(bundle, spec, ctx):
    try:
        return EXPERIMENTS[spec["kind"]](bundle, spec, ctx)
    except Exception as exc:  # surfaced as a named failure, exit 1
        return ExperimentResult(
            kind=spec["kind"], label=spec["label"], passed=False,
            verdicts={"error": f"{type(exc).__name__}: {exc}"},
            failures=[f"{type(exc).__name__}: {exc}"])


# ---------------------------------------------------------------------------
# Run command
# ---------------------------------------------------------------------------

def run(config_path, stdout=None, stderr=None):
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    try:
        config = load_config(config_path)
        bundle = build_scenario(config.scenario_name,
                                **config.scenario_params)
    except ParseError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_PARSE
    except (ConfigError, ValueError, TypeError) as exc:
        # scenario builders validate their own parameters
        print(f"error: {exc}", file=stderr)
        return EXIT_VALIDATION

    ctx = {"seed": config.seed}
    if config.workers > 1 and len(config.experiments) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_execute, bundle, spec, ctx)
                       for spec in config.experiments]
            results = [f.result() for f in futures]
    else:
        results = [_execute(bundle, spec, ctx)
                   for spec in config.experiments]

    # single-owner write phase, in config order, after all computation
    out = config.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for res in results:
            for name, body in res.artifacts:
                path = out / name
                if callable(body):
                    body(path)
                else:
                    path.write_text(body)
                written.append(name)
        manifest = {
            "tool": "bracketflow",
            "version": __version__,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "config_path": config.config_path,
            "config_sha256": config.config_sha256,
            "scenario": {"name": config.scenario_name,
                         "params": config.scenario_params},
            "seed": config.seed,
            "workers": config.workers,
            "experiments": [{
                "kind": r.kind, "label": r.label, "passed": r.passed,
                "tolerances": r.tolerances, "verdicts": r.verdicts,
                "artifacts": [name for name, _ in r.artifacts],
            } for r in results],
            "violated_invariants": [f"{r.label}: {msg}" for r in results
                                    for msg in r.failures],
            "passed": all(r.passed for r in results),
        }
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, default=_json_default) + "\n")
    except OSError as exc:
        print(f"error: writing artifacts failed: {exc}", file=stderr)
        return EXIT_EXPERIMENT

    for res in results:
        status = "ok" if res.passed else "FAILED"
        print(f"[{status}] {res.label} ({res.kind})", file=stdout)
        for msg in res.failures:
            print(f"    {msg}", file=stdout)
    print(f"wrote {len(written) + 1} files to {out}", file=stdout)
    return EXIT_OK if all(r.passed for r in results) else EXIT_EXPERIMENT


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Selftest: the invariant battery
# ---------------------------------------------------------------------------

def _selftest_checks():
    """Fast end-to-end battery over every module's core invariant."""

    def algebra_identities():
        table = unicycle_limit_table(1)
        chk = check_algebraic_identity(table, 4, m=3)
        saw = sawtooth_limit_coefficients().sample(0.0)
        chk2 = check_algebraic_identity(saw, 2)
        return (chk.holds and chk.residual == 0.0 and chk2.holds,
                f"residuals {chk.residual}, {chk2.residual}")

    def frequency_ladder():
        counts = []
        for N in (1, 2, 3):
            rep = check_frequency_properties(N)
            ok = (rep.prop_single and rep.prop_pairs and rep.prop_triples
                  and rep.prop_quadruples and not rep.violations)
            counts.extend(rep.nonpair_patterns.values())
            if not ok:
                return False, f"violations at N={N}: {rep.violations[:2]}"
        return all(c == 12 for c in counts), f"pattern counts {counts}"

    def gd_closed_form():
        omegas, lams, j = (1.0,), [1.0], 10
        u = make_sinusoid_inputs(omegas, lams, j)
        v_j, W = closed_form_sinusoid_gd(omegas, lams, j)
        grid = np.linspace(0.0, 2.0, 2001)
        quad = integrate_generalized_difference(u, v_j, 0.0, W, grid)
        worst = 0.0
        for I in W.indices():
            gap = np.max(np.abs(W.entry(I)(grid) - quad.entry(I)(grid)))
            worst = max(worst, float(gap))
        return worst <= 1e-6, f"sup gap {worst:.3e}"

    def tree_counts():
        ok = all(len(increasing_trees(ell)) == math.factorial(ell)
                 for ell in range(1, 5))
        return ok, "ell! trees for ell <= 4"

    def magic_bracket():
        bundle = build_scenario("linear")
        rng = np.random.default_rng(0)
        levels = np.geomspace(0.01, 10.0, 12)
        points = [(0.0, x) for x in _states_at_levels(bundle, levels, rng)]
        worst = verify_magic_bracket(bundle.system, 1, points, method="jet")
        return worst <= 1e-6, f"worst residual {worst:.3e}"

    def integrator_order():
        sol = lambda t: math.exp(-t)
        errs = []
        for h in (0.02, 0.01):
            traj = integrate(lambda t, x: -x, 0.0, [1.0], 2.0, h)
            errs.append(abs(traj.states[-1, 0] - sol(2.0)))
        return errs[0] / errs[1] >= 8.0, \
            f"error ratio {errs[0] / errs[1]:.1f}"

    def stability_fit():
        ts = np.linspace(0.0, 5.0, 200)
        fit = fit_exponential(ts, 2.0 * np.exp(-3.0 * ts), d0=1.0)
        ok = (abs(fit.lam - 2.0) < 1e-6 and abs(fit.mu - 3.0) < 1e-6
              and fit.envelope_ok)
        return ok, f"lam {fit.lam:.6f}, mu {fit.mu:.6f}"

    def scenario_closed_forms():
        lin = build_scenario("linear")
        rhs, _ = lin.family(5)
        generic = driven_rhs(lin.system, lin.inputs_for(5))
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(5):
            t = float(rng.uniform(0.0, 2.0))
            x = rng.normal(size=1)
            worst = max(worst, float(np.max(np.abs(rhs(t, x)
                                                   - generic(t, x)))))
        fm = build_scenario("formation")
        x = fm.x0
        limit = fm.limit_rhs(0.0, x)
        grad = fm.extras["grad_positions"](x[np.array([0, 1, 3, 4, 6, 7])])
        pos = np.array([0, 1, 3, 4, 6, 7])
        worst2 = float(np.max(np.abs(limit[pos] + grad)))
        return max(worst, worst2) <= 1e-10, \
            f"deviations {worst:.2e}, {worst2:.2e}"

    return [
        ("algebraic identity of the canonical inputs", algebra_identities),
        ("frequency ladder properties, N = 1..3", frequency_ladder),
        ("generalized difference closed form vs quadrature",
         gd_closed_form),
        ("tree expansion counts", tree_counts),
        ("output-feedback bracket law on the linear scenario",
         magic_bracket),
        ("integrator convergence order", integrator_order),
        ("exponential-fit recovery", stability_fit),
        ("scenario closed forms", scenario_closed_forms),
    ]


def selftest(stdout=None):
    stdout = stdout if stdout is not None else sys.stdout
    failures = 0
    for name, check in _selftest_checks():
        try:
            ok, detail = check()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        print(f"[{'ok' if ok else 'FAIL'}] {name} — {detail}", file=stdout)
        failures += 0 if ok else 1
    print(("selftest passed" if failures == 0
           else f"selftest: {failures} check(s) failed"), file=stdout)
    return EXIT_OK if failures == 0 else EXIT_EXPERIMENT


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bracketflow",
        description="Run scenario sweeps and verification experiments, "
                    "emitting deterministic CSV and plot-data artifacts.")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a YAML/JSON run config")
    runp.add_argument("config", help="path to the run configuration")
    sub.add_parser("list-scenarios", help="print the built-in scenarios")
    sub.add_parser("selftest", help="run the cross-module invariant battery")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run(args.config)
    if args.command == "list-scenarios":
        for name, desc in sorted(list_scenarios().items()):
            print(f"{name:12s} {desc}")
        return EXIT_OK
    return selftest()


if __name__ == "__main__":
    sys.exit(main())
