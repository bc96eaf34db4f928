"""The two worked stabilization problems, wired end to end.

Both scenarios steer a control-affine plant toward the zero set of a
nonnegative output by feeding the output through the square-root spiral
shapes and multiplying with fast dither channels:

* ``linear``: a linear plant with quadratic output psi(x) = ||x||^2 and one
  sawtooth or sinusoid dither pair per input column.  The averaged limit is
  the linear flow x' = (A - 2 B diag(lam) B^T) x, so the origin is the
  target and everything has closed forms.

* ``formation``: N unicycles on SE(2)^N that can only measure inter-agent
  distances along the edges of a graph.  The output is the quartic
  formation potential of those distances, and the averaged limit is the
  lift of the planar gradient flow p' = -grad(psi~)(p): positions follow the
  point-agent gradient descent while the headings stay frozen.

Each builder returns a :class:`ScenarioBundle` carrying the driven family
(j -> integrator-ready right-hand side and step), the closed-form limit
dynamics, the pseudo-distance convergence is measured in, and a stability
probe configuration — plus the algebraic objects (system, limit
coefficients, canonical generalized differences) that the verification
experiments consume.  Iterating a bundle unpacks exactly those four core
pieces in order.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .input_signals import (
    Constant,
    as_signal,
    closed_form_sawtooth_gd,
    closed_form_sinusoid_gd,
    closed_form_unicycle_gd,
    make_sawtooth_inputs,
    make_sinusoid_inputs,
    make_unicycle_inputs,
    sawtooth_limit_coefficients,
    sinusoid_limit_coefficients,
    unicycle_frequencies,
    unicycle_limit_coefficients,
)
from .simulator import (
    DistanceSpec,
    integrate,
    oscillatory_step,
    periodic_step,
    position_distance,
)
from .stability_lab import StabilityProbeConfig, ball_starts
from .vector_fields import (
    SHAPE_FLOOR,
    ControlAffineSystem,
    ScalarField,
    VectorField,
    constant_field,
    jet_cos,
    jet_sin,
    linear_field,
)

LIMIT_STEP = 0.01  # integration step for the (slow, smooth) averaged limits


def _hs_fast(y):
    """Scalar h_s(y) = sqrt(y) sin(log y), matching the field-level cutoff."""
    if y < SHAPE_FLOOR:
        return 0.0
    return math.sqrt(y) * math.sin(math.log(y))


def _hc_fast(y):
    if y < SHAPE_FLOOR:
        return 0.0
    return math.sqrt(y) * math.cos(math.log(y))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

@dataclass
class ScenarioBundle:
    """Driven family, averaged limit, distance, and probe config — plus the
    algebraic ingredients the verification experiments need.

    ``family(j)`` returns ``(rhs, step)`` for the driven system at sequence
    index j; ``limit_factory(j)`` does the same for the (j-independent)
    averaged limit so stability probes can run against it with the same
    interface.  ``gd_pair_for(j)`` returns the canonical closed-form
    ``(v^j, W^j)`` pair of the input family and ``v_limit`` its limit
    coefficients.
    """

    name: str
    family: object
    limit_rhs: object
    dist: DistanceSpec
    probe_config: StabilityProbeConfig
    system: ControlAffineSystem
    v_limit: object
    inputs_for: object
    gd_pair_for: object
    limit_factory: object
    e_distance: object
    psi_value: object
    x0: np.ndarray
    js: tuple
    T: float
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.family, self.limit_rhs, self.dist,
                     self.probe_config))


# ---------------------------------------------------------------------------
# Linear plant with quadratic output
# ---------------------------------------------------------------------------

@dataclass
class LinearOutputScenario:
    """Problem data for the linear scenario.

    ``lam`` may be a positive constant, one constant per input column, or
    per-column signal descriptors (bounded C^1) for the sinusoid family.
    The sawtooth family hard-wires its gain into the channel amplitude, so
    it is only accepted with the single-column, unit-gain configuration it
    encodes.
    """

    A: object = ((1.0,),)
    B: object = ((1.0,),)
    lam: object = 1.0
    family: str = "sawtooth"
    omegas: object = None
    x0: object = (1.0,)
    js: tuple = (1, 10, 100)
    T: float = 6.0
    delta: float = 1.0
    epsilons: tuple = (0.5, 0.25)
    t0_list: tuple = (0.0,)
    name: str = "linear"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n, n2 = self.A.shape
        if n != n2:
            raise ValueError("A must be square")
        if self.B.shape[0] != n:
            raise ValueError("B must have as many rows as A")
        self.n = n
        self.p = self.B.shape[1]
        if np.linalg.matrix_rank(self.B) < n:
            raise ValueError("B must have full row rank: every direction "
                             "needs to be reachable by the dither channels")
        if self.family not in ("sawtooth", "sinusoid"):
            raise ValueError("input family must be 'sawtooth' or 'sinusoid'")
        lams = self.lam
        if np.isscalar(lams) or isinstance(lams, Constant) or not hasattr(lams, "__len__"):
            lams = [lams] * self.p
        if len(lams) != self.p:
            raise ValueError("need one gain per input column")
        self.lam_signals = [as_signal(l) for l in lams]
        self.lam0 = np.array([float(sig(0.0)) for sig in self.lam_signals])
        if np.any(self.lam0 <= 0.0):
            raise ValueError("gains must be positive")
        if self.family == "sawtooth":
            if self.p != 1:
                raise ValueError("the sawtooth family provides exactly one "
                                 "dither pair; use the sinusoid family for "
                                 "multi-column B")
            if not all(isinstance(sig, Constant) and sig.value == 1.0
                       for sig in self.lam_signals):
                raise ValueError("the sawtooth family encodes a unit gain in "
                                 "its amplitude; pass lam=1 or switch to the "
                                 "sinusoid family")
        if self.omegas is None:
            self.omegas = tuple(float(k) for k in range(1, self.p + 1))
        else:
            self.omegas = tuple(float(w) for w in self.omegas)
        if len(self.omegas) != self.p:
            raise ValueError("need one carrier frequency per input column")
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (n,):
            raise ValueError("x0 must have the state dimension")
        self.limit_matrix = self.A - 2.0 * (self.B * self.lam0) @ self.B.T
        if np.max(np.linalg.eigvals(self.limit_matrix).real) >= 0.0:
            warnings.warn("averaged limit matrix is not Hurwitz at t=0; the "
                          "origin will not attract — probes run anyway",
                          stacklevel=3)


def build_linear_scenario(cfg=None, **kwargs):
    """Wire the linear scenario: dither-driven plant, averaged limit,
    Euclidean distance to the origin, and a stability probe around it."""
    if cfg is None:
        cfg = LinearOutputScenario(**kwargs)
    elif isinstance(cfg, dict):
        cfg = LinearOutputScenario(**cfg)
    A, B, n, p = cfg.A, cfg.B, cfg.n, cfg.p
    lam_signals = cfg.lam_signals

    psi = ScalarField(n, _sum_of_squares, name="norm-squared")

    controls, shapes = [], []
    for k in range(p):
        g_k = constant_field(B[:, k], name=f"b{k + 1}")
        controls.extend([g_k, g_k])
        shapes.extend(["hs", "hc"])
    system = ControlAffineSystem(n, controls, drift=linear_field(A, name="A"),
                                 psi=psi, shapes=shapes, name=cfg.name)

    if cfg.family == "sawtooth":
        def inputs_for(j):
            return make_sawtooth_inputs(j)

        def step_for(j):
            return periodic_step(1.0 / j)

        def gd_pair_for(j):
            return closed_form_sawtooth_gd(j)

        v_limit = sawtooth_limit_coefficients()
    else:
        omegas, lams = cfg.omegas, lam_signals

        def inputs_for(j):
            return make_sinusoid_inputs(omegas, lams, j)

        def step_for(j):
            return oscillatory_step(j, max(omegas))

        def gd_pair_for(j):
            return closed_form_sinusoid_gd(omegas, lams, j)

        v_limit = sinusoid_limit_coefficients(omegas, lams)

    scalar_plant = (n == 1 and p == 1)
    a00 = float(A[0, 0])
    b00 = float(B[0, 0])

    def family(j):
        u = inputs_for(j)
        if scalar_plant:
            def rhs(t, x, u=u):
                xv = float(x[0])
                vals = u.evaluate(t)
                gain = (float(vals[0]) * _hs_fast(xv * xv)
                        + float(vals[1]) * _hc_fast(xv * xv))
                return np.array([a00 * xv + b00 * gain])
        else:
            def rhs(t, x, u=u):
                y = float(x @ x)
                vals = u.evaluate(t)
                hs_v, hc_v = _hs_fast(y), _hc_fast(y)
                coef = np.array([float(vals[2 * k]) * hs_v
                                 + float(vals[2 * k + 1]) * hc_v
                                 for k in range(p)])
                return A @ x + B @ coef
        return rhs, step_for(j)

    M = cfg.limit_matrix
    time_varying = not all(isinstance(sig, Constant) for sig in lam_signals)
    if time_varying:
        def limit_rhs(t, x):
            lam_t = np.array([float(sig(t)) for sig in lam_signals])
            return (A - 2.0 * (B * lam_t) @ B.T) @ x
    elif scalar_plant:
        m00 = float(M[0, 0])

        def limit_rhs(t, x):
            return m00 * x
    else:
        def limit_rhs(t, x):
            return M @ x

    def limit_factory(j):
        return limit_rhs, LIMIT_STEP

    def e_distance(x):
        return float(np.linalg.norm(x))

    dist = DistanceSpec(None, weight=e_distance, name="euclidean")
    probe_config = StabilityProbeConfig(
        e_distance=e_distance, delta=cfg.delta, epsilons=list(cfg.epsilons),
        T=cfg.T, t0_list=list(cfg.t0_list), js=list(cfg.js),
        x0_list=ball_starts(np.zeros(n), cfg.delta))

    return ScenarioBundle(
        name=cfg.name, family=family, limit_rhs=limit_rhs, dist=dist,
        probe_config=probe_config, system=system, v_limit=v_limit,
        inputs_for=inputs_for, gd_pair_for=gd_pair_for,
        limit_factory=limit_factory, e_distance=e_distance,
        psi_value=lambda x: float(np.dot(x, x)), x0=cfg.x0.copy(),
        js=tuple(cfg.js), T=cfg.T,
        extras={"config": cfg, "limit_matrix": M})


def _sum_of_squares(t, xs):
    acc = None
    for c in xs:
        term = c * c
        acc = term if acc is None else acc + term
    return acc


# ---------------------------------------------------------------------------
# Formation potential on the plane
# ---------------------------------------------------------------------------

def _normalize_edges(N, edges, targets):
    """Edges as 1-based pairs; targets as one length per edge (scalar fans
    out).  Returns parallel tuples (pairs, lengths)."""
    if edges is None:
        edges = [(a, b) for a in range(1, N + 1) for b in range(a + 1, N + 1)]
    pairs = []
    for e in edges:
        a, b = int(e[0]), int(e[1])
        if not (1 <= a <= N and 1 <= b <= N) or a == b:
            raise ValueError(f"edge {e!r} is not a pair of distinct agents")
        pairs.append((min(a, b), max(a, b)))
    if len(set(pairs)) != len(pairs):
        raise ValueError("duplicate edges")
    if np.isscalar(targets):
        lengths = [float(targets)] * len(pairs)
    else:
        lengths = [float(d) for d in targets]
    if len(lengths) != len(pairs):
        raise ValueError("need one target length per edge")
    if any(d <= 0.0 for d in lengths):
        raise ValueError("target lengths must be positive")
    return tuple(pairs), tuple(lengths)


def gradient_potential(p, edges, targets):
    """Formation potential 1/4 sum_edges (||p_b - p_a||^2 - d^2)^2 and its
    exact gradient, on stacked planar positions p = (x_1, y_1, ..., x_N, y_N).
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size % 2 != 0:
        raise ValueError("positions must be a flat (2N,) vector")
    N = p.size // 2
    pairs, lengths = _normalize_edges(N, edges, targets)
    pts = p.reshape(N, 2)
    value = 0.0
    grad = np.zeros((N, 2))
    for (a, b), d in zip(pairs, lengths):
        diff = pts[b - 1] - pts[a - 1]
        gap = float(diff @ diff) - d * d
        value += 0.25 * gap * gap
        grad[a - 1] -= gap * diff
        grad[b - 1] += gap * diff
    return value, grad.ravel()


def formation_set_distance(p, edges, targets, h=0.02, tol=1e-14,
                           t_max=400.0):
    """Upper bound on the Euclidean distance from p to the feasible set,
    measured as the displacement of the gradient flow run to convergence.

    The flow is integrated in fixed-step chunks until the potential falls
    below ``tol``; the distance travelled to the resting point is exact in
    the limit for gradient flows and a consistent upper bound otherwise.
    """
    p = np.asarray(p, dtype=float)
    N = p.size // 2
    pairs, lengths = _normalize_edges(N, edges, targets)

    def rhs(t, q):
        return -gradient_potential(q, pairs, lengths)[1]

    t, q = 0.0, p.copy()
    while t < t_max:
        traj = integrate(rhs, t, q, min(10.0, t_max - t), h)
        if not traj.completed:
            raise RuntimeError(f"descent diverged ({traj.reason})")
        t, q = traj.t_end, traj.states[-1]
        if gradient_potential(q, pairs, lengths)[0] < tol:
            return float(np.linalg.norm(q - p)), q
    raise RuntimeError("descent did not reach the feasible set within "
                       f"t={t_max}; potential is stuck at "
                       f"{gradient_potential(q, pairs, lengths)[0]:.3e}")


# ---------------------------------------------------------------------------
# Unicycle formation scenario
# ---------------------------------------------------------------------------

@dataclass
class FormationScenario:
    """Problem data for N unicycles with distance-only measurements.

    ``witness`` is a flat (2N,) feasible position vector; when omitted, a
    regular N-gon with circumradius matched to the first target length is
    tried (exact for the triangle and segment defaults).  The default start
    scales the witness radially by ``offset`` about its centroid — for the
    unit triangle that displaces the positions by exactly ``offset`` in the
    direction normal to the feasible set.  Headings are reduced modulo 2 pi
    on construction and left unreduced during integration.
    """

    N: int = 3
    edges: object = None
    targets: object = 1.0
    witness: object = None
    x0: object = None
    offset: float = 0.3
    headings: object = None
    js: tuple = (1, 10, 100)
    T: float = 6.0
    epsilons: object = None
    t0_list: tuple = (0.0,)
    name: str = "formation"

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two agents")
        self.pairs, self.lengths = _normalize_edges(self.N, self.edges,
                                                    self.targets)
        if self.witness is None:
            radius = self.lengths[0] / (2.0 * math.sin(math.pi / self.N))
            angles = [0.5 * math.pi + 2.0 * math.pi * k / self.N
                      for k in range(self.N)]
            witness = np.array([c for a in angles
                                for c in (radius * math.cos(a),
                                          radius * math.sin(a))])
        else:
            witness = np.asarray(self.witness, dtype=float)
        if witness.shape != (2 * self.N,):
            raise ValueError("witness must be a flat (2N,) position vector")
        pts = witness.reshape(self.N, 2)
        for (a, b), d in zip(self.pairs, self.lengths):
            got = float(np.linalg.norm(pts[b - 1] - pts[a - 1]))
            if abs(got - d) > 1e-9 * max(1.0, d):
                raise ValueError(
                    "infeasible targets: the witness places agents "
                    f"{a},{b} at distance {got:.12g}, not {d:.12g}")
        self.witness = witness
        if self.headings is None:
            self.headings = np.array([
                (0.2 + 2.0 * math.pi * k / self.N) % (2.0 * math.pi)
                for k in range(self.N)])
        else:
            self.headings = np.asarray(self.headings, dtype=float) % (2.0 * math.pi)
        if self.headings.shape != (self.N,):
            raise ValueError("need one heading per agent")
        if self.x0 is None:
            centroid = pts.mean(axis=0)
            scaled = centroid + (1.0 + self.offset / _witness_norm(pts)) \
                * (pts - centroid)
            self.x0 = _se2_state(scaled.ravel(), self.headings)
        else:
            self.x0 = np.asarray(self.x0, dtype=float)
            if self.x0.shape != (3 * self.N,):
                raise ValueError("x0 must be a flat (3N,) state")
            self.x0 = self.x0.copy()
            self.x0[2::3] %= 2.0 * math.pi


def _witness_norm(pts):
    centroid = pts.mean(axis=0)
    return float(np.linalg.norm(pts - centroid))


def _se2_state(positions, headings):
    N = len(headings)
    x = np.empty(3 * N)
    x[0::3] = positions[0::2]
    x[1::3] = positions[1::2]
    x[2::3] = headings
    return x


def _translation_field(N, nu):
    """Unit-speed translation along agent nu's heading."""
    ith = 3 * (nu - 1) + 2

    def fn(t, xs, ix=3 * (nu - 1), iy=3 * (nu - 1) + 1, ith=ith):
        out = [0.0] * (3 * N)
        out[ix] = jet_cos(xs[ith])
        out[iy] = jet_sin(xs[ith])
        return out

    return VectorField(3 * N, fn, name=f"g{nu}t")


def _perpendicular_field(N, nu):
    """Unit sideways drift of agent nu: the bracket of rotation into
    translation, pointing perpendicular to the heading."""
    ith = 3 * (nu - 1) + 2

    def fn(t, xs, ix=3 * (nu - 1), iy=3 * (nu - 1) + 1, ith=ith):
        out = [0.0] * (3 * N)
        out[ix] = -jet_sin(xs[ith])
        out[iy] = jet_cos(xs[ith])
        return out

    return VectorField(3 * N, fn, name=f"g{nu}p")


def _rotation_field(N, nu):
    e = np.zeros(3 * N)
    e[3 * (nu - 1) + 2] = 1.0
    return constant_field(e, name=f"g{nu}r")


def unicycle_fields(N):
    """Per-agent (translation, rotation, perpendicular) field triples."""
    return [(_translation_field(N, nu), _rotation_field(N, nu),
             _perpendicular_field(N, nu)) for nu in range(1, N + 1)]


def build_formation_scenario(cfg=None, **kwargs):
    """Wire the unicycle formation scenario: distance-driven dither family,
    lifted gradient-flow limit, position pseudo-distance, and a probe
    measuring the square root of the potential (which vanishes exactly on
    the target set and is equivalent to the set distance near it)."""
    if cfg is None:
        cfg = FormationScenario(**kwargs)
    elif isinstance(cfg, dict):
        cfg = FormationScenario(**cfg)
    N = cfg.N
    n = 3 * N
    pairs, lengths = cfg.pairs, cfg.lengths
    pos_idx = np.array([k for k in range(n) if k % 3 != 2])

    def psi_positions(p):
        return gradient_potential(p, pairs, lengths)[0]

    def psi_value(x):
        return psi_positions(np.asarray(x, dtype=float)[pos_idx])

    def e_distance(x):
        return math.sqrt(psi_value(x))

    def psi_jet(t, xs):
        acc = None
        for (a, b), d in zip(pairs, lengths):
            dx = xs[3 * (b - 1)] - xs[3 * (a - 1)]
            dy = xs[3 * (b - 1) + 1] - xs[3 * (a - 1) + 1]
            gap = dx * dx + dy * dy - d * d
            term = gap * gap
            acc = term if acc is None else acc + term
        return acc * 0.25

    psi = ScalarField(n, psi_jet, name="formation-potential")

    triples = unicycle_fields(N)
    controls, shapes = [], []
    for g_t, g_r, _g_p in triples:
        controls.extend([g_t, g_t, g_r])
        shapes.extend(["hs", "hc", "one"])
    system = ControlAffineSystem(n, controls, psi=psi, shapes=shapes,
                                 name=cfg.name)

    ea = np.array([a - 1 for a, _ in pairs])
    eb = np.array([b - 1 for _, b in pairs])
    d2 = np.array(lengths) ** 2

    def grad_positions(p):
        pts = p.reshape(N, 2)
        diff = pts[eb] - pts[ea]
        gap = np.einsum("ij,ij->i", diff, diff) - d2
        grad = np.zeros((N, 2))
        np.add.at(grad, ea, -(gap[:, None] * diff))
        np.add.at(grad, eb, gap[:, None] * diff)
        return grad.ravel()

    def limit_rhs(t, x):
        out = np.zeros(n)
        out[pos_idx] = -grad_positions(x[pos_idx])
        return out

    def limit_factory(j):
        return limit_rhs, LIMIT_STEP

    omega_max = max(w for triple in unicycle_frequencies(N) for w in triple)

    def inputs_for(j):
        return make_unicycle_inputs(N, j)

    def family(j):
        u = inputs_for(j)
        h = oscillatory_step(j, omega_max)

        def rhs(t, x, u=u):
            vals = u.evaluate(t)
            y = psi_positions(x[pos_idx])
            hs_v, hc_v = _hs_fast(y), _hc_fast(y)
            out = np.zeros(n)
            for nu in range(N):
                th = x[3 * nu + 2]
                speed = (float(vals[3 * nu]) * hs_v
                         + float(vals[3 * nu + 1]) * hc_v)
                out[3 * nu] = speed * math.cos(th)
                out[3 * nu + 1] = speed * math.sin(th)
                out[3 * nu + 2] = float(vals[3 * nu + 2])
            return out

        return rhs, h

    def gd_pair_for(j):
        return closed_form_unicycle_gd(N, j)

    d0 = e_distance(cfg.x0)
    epsilons = (cfg.epsilons if cfg.epsilons is not None
                else [0.5 * d0, 0.25 * d0, 0.1 * d0])
    probe_config = StabilityProbeConfig(
        e_distance=e_distance, delta=1.05 * d0, epsilons=list(epsilons),
        T=cfg.T, t0_list=list(cfg.t0_list), js=list(cfg.js),
        x0_list=[cfg.x0.copy()])

    dist = position_distance(N, weight=e_distance)

    return ScenarioBundle(
        name=cfg.name, family=family, limit_rhs=limit_rhs, dist=dist,
        probe_config=probe_config, system=system,
        v_limit=unicycle_limit_coefficients(N), inputs_for=inputs_for,
        gd_pair_for=gd_pair_for, limit_factory=limit_factory,
        e_distance=e_distance, psi_value=psi_value, x0=cfg.x0.copy(),
        js=tuple(cfg.js), T=cfg.T,
        extras={"config": cfg, "N": N, "edges": pairs, "targets": lengths,
                "witness": cfg.witness,
                "fields": triples,
                "set_distance": lambda x: formation_set_distance(
                    np.asarray(x, dtype=float)[pos_idx], pairs, lengths)[0],
                "grad_positions": grad_positions})


# ---------------------------------------------------------------------------
# Rigid-motion equivariance
# ---------------------------------------------------------------------------

def rigid_motion(states, N, angle=0.0, shift=(0.0, 0.0), agents=None):
    """Apply a planar rotation about the origin plus a translation to the
    selected agents of one state or a stacked array of states."""
    states = np.array(states, dtype=float, copy=True)
    shift = np.asarray(shift, dtype=float)
    sel = range(1, N + 1) if agents is None else agents
    c, s = math.cos(angle), math.sin(angle)
    for nu in sel:
        ix, iy, ith = 3 * (nu - 1), 3 * (nu - 1) + 1, 3 * (nu - 1) + 2
        x, y = states[..., ix].copy(), states[..., iy].copy()
        states[..., ix] = c * x - s * y + shift[0]
        states[..., iy] = s * x + c * y + shift[1]
        states[..., ith] += angle
    return states


def rotation_invariance_check(bundle, angle=0.0, shift=(0.0, 0.0),
                              agents=None, j=None, x0=None, T=2.0):
    """Sup deviation between 'move the start, then flow' and 'flow, then
    move' under a planar rigid motion of the selected agents.

    The formation dynamics only see inter-agent distances, so moving every
    agent rigidly must commute with the flow (residual at round-off);
    moving a strict subset breaks the distances and serves as the negative
    control.  ``j=None`` checks the averaged limit, an integer checks the
    driven system at that index.
    """
    N = bundle.extras.get("N")
    if N is None:
        raise ValueError("rigid-motion checks need a formation bundle")
    x0 = bundle.x0 if x0 is None else np.asarray(x0, dtype=float)
    rhs, h = bundle.limit_factory(1) if j is None else bundle.family(j)
    base = integrate(rhs, 0.0, x0, T, h)
    moved = integrate(rhs, 0.0,
                      rigid_motion(x0, N, angle, shift, agents), T, h)
    if not (base.completed and moved.completed):
        return math.inf
    expected = rigid_motion(base.states, N, angle, shift, agents)
    return float(np.max(np.abs(moved.states - expected)))


SCENARIOS = {
    "linear": (build_linear_scenario,
               "linear plant, quadratic output, dither pair per column"),
    "formation": (build_formation_scenario,
                  "N unicycles reaching prescribed inter-agent distances"),
}


def list_scenarios():
    """Name -> one-line description of every built-in scenario."""
    return {name: desc for name, (_, desc) in SCENARIOS.items()}


def build_scenario(name, cfg=None, **kwargs):
    try:
        builder, _ = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; available: "
                         f"{', '.join(sorted(SCENARIOS))}") from None
    return builder(cfg, **kwargs)
