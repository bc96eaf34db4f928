"""Control-affine systems in coordinates and their bracket calculus.

Vector fields and scalar fields are plain Python callables written with
overloaded arithmetic, so the same definition evaluates on floats and on
truncated Taylor jets (forward-mode automatic differentiation).  On top of
that this module provides:

* Lie derivatives and right-nested iterated Lie brackets [f_I], each with an
  analytic (jet) route and an independent finite-difference route;
* output-feedback composition f_i = h_i(psi) e_i with the square-root spiral
  shapes h_s(y) = sqrt(y) sin(log y), h_c(y) = sqrt(y) cos(log y) (both 0 for
  y <= 0), including their closed-form derivative ladder;
* assembly of the averaged limit system f_0 + sum (v_I/|I|) [f_I], gated on
  the exact algebraic identity that makes the limit well-formed;
* the increasing-tree expansion of iterated Lie derivatives f_I alpha,
  with the inner factors evaluated through the set-partition (Faa di Bruno)
  formula — a third route, independent of both direct nesting and jets.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .free_algebra import MultiIndex

SHAPE_FLOOR = 1e-300  # below this, h_s and h_c are exactly 0 (value < noise)


# ---------------------------------------------------------------------------
# Jets: truncated multivariate Taylor expansions (forward-mode AD)
# ---------------------------------------------------------------------------

def _drop(c):
    """True for coefficients that can be dropped (exact scalar zeros only;
    array coefficients are always kept so batch jets stay aligned)."""
    return isinstance(c, float) and c == 0.0


class Jet:
    """Taylor coefficients of a smooth function at a point, up to `order`.

    `terms` maps exponent tuples to Taylor coefficients (the mixed partial
    divided by the factorials), so evaluation-by-substitution, products and
    partial derivatives are exact polynomial operations.  Coefficients may be
    floats or numpy arrays; seeding the variables with arrays evaluates the
    jet at a whole batch of points in one pass.
    """

    __slots__ = ("n", "order", "terms")

    def __init__(self, n, order, terms=None):
        self.n = n
        self.order = order
        self.terms = terms if terms is not None else {}

    @classmethod
    def constant(cls, value, n, order):
        if not isinstance(value, np.ndarray):
            value = float(value)
        return cls(n, order, {} if _drop(value) else {(0,) * n: value})

    @classmethod
    def variable(cls, k, value, n, order):
        """Coordinate function x_k seeded at the point value."""
        if not isinstance(value, np.ndarray):
            value = float(value)
        terms = {} if _drop(value) else {(0,) * n: value}
        if order >= 1:
            e = [0] * n
            e[k] = 1
            terms[tuple(e)] = 1.0
        return cls(n, order, terms)

    @property
    def value(self):
        return self.terms.get((0,) * self.n, 0.0)

    def _coerce(self, other):
        if isinstance(other, Jet):
            if other.n != self.n:
                raise ValueError("jet dimension mismatch")
            return other
        return Jet.constant(other, self.n, self.order)

    def __add__(self, other):
        other = self._coerce(other)
        order = min(self.order, other.order)
        terms = {}
        for e, c in itertools.chain(self.terms.items(), other.terms.items()):
            if sum(e) <= order:
                terms[e] = terms.get(e, 0.0) + c
        return Jet(self.n, order, {e: c for e, c in terms.items()
                                   if not _drop(c)})

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.n, self.order, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            c = other if isinstance(other, np.ndarray) else float(other)
            if _drop(c):
                return Jet(self.n, self.order, {})
            return Jet(self.n, self.order,
                       {e: c * v for e, v in self.terms.items()})
        other = self._coerce(other)
        order = min(self.order, other.order)
        terms = {}
        for e1, c1 in self.terms.items():
            d1 = sum(e1)
            for e2, c2 in other.terms.items():
                if d1 + sum(e2) > order:
                    continue
                e = tuple(a + b for a, b in zip(e1, e2))
                terms[e] = terms.get(e, 0.0) + c1 * c2
        return Jet(self.n, order, terms)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise TypeError("jet-by-jet division is not supported")
        return self * (1.0 / float(other))

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            raise TypeError("jets support nonnegative integer powers only")
        out = Jet.constant(1.0, self.n, self.order)
        for _ in range(k):
            out = out * self
        return out

    def partial(self, k):
        """d/dx_k as a jet one order lower."""
        terms = {}
        for e, c in self.terms.items():
            if e[k] == 0:
                continue
            d = list(e)
            d[k] -= 1
            terms[tuple(d)] = c * e[k]
        return Jet(self.n, max(self.order - 1, 0), terms)

    def compose(self, derivs):
        """g(self) for a univariate g given derivs = [g(y0), g'(y0), ...].

        `derivs` must run up to this jet's order; y0 is the jet's value.
        Evaluated by Horner's scheme in the nilpotent part (self - y0).
        """
        if len(derivs) < self.order + 1:
            raise ValueError("need outer derivatives up to the jet order")
        delta = self - self.value
        out = Jet.constant(derivs[self.order] / math.factorial(self.order),
                           self.n, self.order)
        for d in range(self.order - 1, -1, -1):
            out = out * delta + derivs[d] / math.factorial(d)
        return out

    def __repr__(self):
        return f"Jet(n={self.n}, order={self.order}, nnz={len(self.terms)})"


def _univariate(x, derivs_fn):
    """Apply a univariate function to a float, array or jet argument."""
    if isinstance(x, Jet):
        return x.compose(derivs_fn(x.value, x.order))
    if isinstance(x, np.ndarray):
        return derivs_fn(x, 0)[0]
    return float(derivs_fn(float(x), 0)[0])


def jet_sin(x):
    def derivs(y, q):
        cycle = [np.sin(y), np.cos(y)]
        cycle += [-cycle[0], -cycle[1]]
        return [cycle[d % 4] for d in range(q + 1)]
    return _univariate(x, derivs)


def jet_cos(x):
    def derivs(y, q):
        cycle = [np.cos(y), -np.sin(y)]
        cycle += [-cycle[0], -cycle[1]]
        return [cycle[d % 4] for d in range(q + 1)]
    return _univariate(x, derivs)


def jet_exp(x):
    def derivs(y, q):
        e = np.exp(y)
        return [e] * (q + 1)
    return _univariate(x, derivs)


def jet_sqrt(x):
    def derivs(y, q):
        if np.any(np.asarray(y) <= 0.0):
            raise ValueError("sqrt jet needs a positive base point")
        out = [np.sqrt(y)]
        coef = 0.5
        for d in range(1, q + 1):
            out.append(coef * y ** (0.5 - d))
            coef *= 0.5 - d
        return out
    return _univariate(x, derivs)


def jet_log(x):
    def derivs(y, q):
        if np.any(np.asarray(y) <= 0.0):
            raise ValueError("log jet needs a positive base point")
        out = [np.log(y)]
        for d in range(1, q + 1):
            out.append((-1.0) ** (d - 1) * math.factorial(d - 1) / y ** d)
        return out
    return _univariate(x, derivs)


def _as_jet(value, n, order):
    return value if isinstance(value, Jet) else Jet.constant(value, n, order)


def _seed_jets(x, order):
    x = np.asarray(x, dtype=float)
    n = len(x)
    return [Jet.variable(k, x[k], n, order) for k in range(n)]


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

class ScalarField:
    """Scalar field alpha(t, x), written so the body runs on floats or jets."""

    def __init__(self, n, fn, analytic=True, name=""):
        self.n = n
        self.fn = fn
        self.analytic = analytic
        self.name = name

    def value(self, t, x):
        return float(self.fn(t, [float(c) for c in np.asarray(x, dtype=float)]))

    def jet(self, t, x, order):
        if not self.analytic:
            raise ValueError(f"scalar field {self.name or '<anon>'} has no "
                             "analytic oracle")
        out = self.fn(t, _seed_jets(x, order))
        return _as_jet(out, len(np.asarray(x)), order)

    def gradient(self, t, x, method="auto"):
        x = np.asarray(x, dtype=float)
        if method == "auto":
            method = "jet" if self.analytic else "fd"
        if method == "jet":
            j = self.jet(t, x, 1)
            return np.array([j.partial(k).value for k in range(len(x))])
        step = _fd_level_step(1) * (1.0 + float(np.linalg.norm(x)))
        grad = np.empty(len(x))
        for k in range(len(x)):
            basis = np.zeros(len(x))
            basis[k] = 1.0
            grad[k] = _richardson_directional(
                lambda xx: self.value(t, xx), x, basis, step)
        return grad

    def __repr__(self):
        return f"ScalarField({self.name or 'anon'}, n={self.n})"


class VectorField:
    """Time-varying vector field on R^n with analytic and/or FD oracles.

    The body `fn(t, xs)` receives the coordinates as a list (floats or jets)
    and returns a sequence of n components.  `smoothness` is a free-form tag
    ("smooth", "c2", ...) used for reporting only.
    """

    def __init__(self, n, fn, analytic=True, name="", smoothness="smooth"):
        self.n = n
        self.fn = fn
        self.analytic = analytic
        self.name = name
        self.smoothness = smoothness

    def __call__(self, t, x):
        xs = [float(c) for c in np.asarray(x, dtype=float)]
        return np.array([float(c) for c in self.fn(t, xs)])

    def jet(self, t, x, order):
        if not self.analytic:
            raise ValueError(f"vector field {self.name or '<anon>'} has no "
                             "analytic oracle")
        comps = self.fn(t, _seed_jets(x, order))
        n = len(np.asarray(x))
        return [_as_jet(c, n, order) for c in comps]

    def __repr__(self):
        return f"VectorField({self.name or 'anon'}, n={self.n})"


def constant_field(vec, name=""):
    vec = [float(c) for c in vec]
    return VectorField(len(vec), lambda t, xs: list(vec), name=name)


def linear_field(A, name=""):
    """x -> A x as an analytic field (written componentwise for jet support)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]

    def fn(t, xs):
        return [sum(A[i, k] * xs[k] for k in range(n) if A[i, k] != 0.0)
                for i in range(n)]

    return VectorField(n, fn, name=name)


def zero_field(n, name="zero"):
    return VectorField(n, lambda t, xs: [0.0] * n, name=name)


# ---------------------------------------------------------------------------
# Finite-difference machinery (independent cross-check route)
# ---------------------------------------------------------------------------

def _fd_level_step(depth):
    """Difference step for the `depth`-th nesting level (innermost = 1).

    A central difference of a function carrying evaluation noise delta is
    best taken at h ~ delta^(1/3) and leaves noise ~ delta/h = delta^(2/3);
    iterating from machine epsilon gives steps eps^((2/3)^(d-1)/3).  Without
    this widening, nested differences amplify round-off catastrophically.
    """
    eps = float(np.finfo(float).eps)
    return eps ** ((2.0 / 3.0) ** (depth - 1) / 3.0)


def _richardson_directional(fn, x, direction, step):
    """Directional derivative of fn at x along `direction` (not normalized).

    Central differences at steps h and h/2 combined by one Richardson
    extrapolation, as the nested-bracket error analysis calls for.
    """
    def central(h):
        return (np.asarray(fn(x + h * direction))
                - np.asarray(fn(x - h * direction))) / (2.0 * h)

    d1 = central(step)
    d2 = central(0.5 * step)
    return (4.0 * d2 - d1) / 3.0


def _fd_jacvec(fn, t, x, v, depth=1):
    """(D fn)(t,x) . v by central differences along v."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros(len(x))
    step = _fd_level_step(depth) * (1.0 + float(np.linalg.norm(x))) / norm
    return _richardson_directional(lambda xx: fn(t, xx), x, v, step)


# ---------------------------------------------------------------------------
# Lie derivatives and iterated brackets
# ---------------------------------------------------------------------------

def lie_derivative(f, alpha, t, x, method="auto"):
    """(f alpha)(t, x) = grad alpha(x) . f(t, x)."""
    x = np.asarray(x, dtype=float)
    return float(np.dot(alpha.gradient(t, x, method=method), f(t, x)))


def _fields_map(fields):
    """Accept a sequence (1-based channels) or a {channel: field} mapping."""
    if isinstance(fields, dict):
        return fields
    return {i: f for i, f in enumerate(fields, start=1)}


def _bracket_jets(a, b):
    """[a, b] on jet vectors: (Db) a - (Da) b, one order lower."""
    n = len(a)
    out = []
    for i in range(n):
        acc = None
        for k in range(n):
            term = b[i].partial(k) * a[k] - a[i].partial(k) * b[k]
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def iterated_bracket(fields, I, t, x, method="auto"):
    """Right-nested iterated Lie bracket [f_I](t,x) in coordinates.

    [f_I] = [f_{i_1}, [f_{i_2}, [... f_{i_l}]]], each two-field bracket being
    [f, g] = Dg.f - Df.g.  The analytic route evaluates every field as a jet
    of order |I|-1 and brackets at the jet level; the finite-difference route
    nests Jacobian-vector products with central differences and Richardson
    extrapolation (step scaled per nesting level).
    """
    fmap = _fields_map(fields)
    I = I if isinstance(I, MultiIndex) else MultiIndex(I, max(fmap))
    x = np.asarray(x, dtype=float)
    ell = len(I)
    if ell == 1:
        return fmap[I[0]](t, x)
    if method == "auto":
        method = ("jet" if all(fmap[i].analytic for i in set(tuple(I)))
                  else "fd")
    if method == "jet":
        jets = {i: fmap[i].jet(t, x, ell - 1) for i in set(tuple(I))}

        def recurse(idx):
            if len(idx) == 1:
                return jets[idx[0]]
            return _bracket_jets(jets[idx[0]], recurse(idx[1:]))

        vals = [c.value for c in recurse(tuple(I))]
        return np.array(np.broadcast_arrays(*vals))
    if method == "fd":
        def recurse(idx):
            if len(idx) == 1:
                return fmap[idx[0]]
            outer = fmap[idx[0]]
            inner = recurse(idx[1:])

            def call(tt, xx, outer=outer, inner=inner, depth=len(idx) - 1):
                # only the inner bracket is FD-noisy; the raw outer field
                # can be differentiated at the innermost step size
                return (_fd_jacvec(inner, tt, xx, outer(tt, xx), depth=depth)
                        - _fd_jacvec(outer, tt, xx, inner(tt, xx), depth=1))

            return call

        return np.asarray(recurse(tuple(I))(t, x))
    raise ValueError(f"unknown bracket method {method!r}")


def bracket_of_pair(f, g, t, x, method="auto"):
    """[f, g](t, x) for two fields (convenience wrapper)."""
    return iterated_bracket({1: f, 2: g}, MultiIndex((1, 2), 2), t, x,
                            method=method)


# ---------------------------------------------------------------------------
# Output shapes h_s, h_c and feedback composition
# ---------------------------------------------------------------------------

class OutputShape:
    """Feedback shape: identically 1, or one of the square-root spirals.

    h_s(y) = sqrt(y) sin(log y) and h_c(y) = sqrt(y) cos(log y) for y > 0,
    both 0 for y <= 0.  Their derivatives stay in the two-parameter family
    y^(1/2-d) (a sin + b cos)(log y) with (a, b) stepping by
    (a, b) -> (e a - b, e b + a) at exponent e = 1/2 - (d-1), which gives the
    whole ladder in closed form.
    """

    def __init__(self, kind):
        if kind not in ("one", "hs", "hc"):
            raise ValueError("shape kind must be 'one', 'hs' or 'hc'")
        self.kind = kind

    def __eq__(self, other):
        return isinstance(other, OutputShape) and self.kind == other.kind

    def value(self, y):
        if self.kind == "one":
            return np.ones_like(y) if isinstance(y, np.ndarray) else 1.0
        y_arr = np.asarray(y, dtype=float)
        safe = np.where(y_arr >= SHAPE_FLOOR, y_arr, 1.0)
        trig = np.sin if self.kind == "hs" else np.cos
        vals = np.where(y_arr >= SHAPE_FLOOR,
                        np.sqrt(safe) * trig(np.log(safe)), 0.0)
        return float(vals) if np.ndim(y) == 0 else vals

    def derivs(self, y, q):
        """[h(y), h'(y), ..., h^(q)(y)] for y > 0 (scalar or array)."""
        if self.kind == "one":
            return [1.0] + [0.0] * q
        if np.any(np.asarray(y) <= 0.0):
            raise ValueError("shape derivatives are undefined at y <= 0")
        a, b = (1.0, 0.0) if self.kind == "hs" else (0.0, 1.0)
        e = 0.5
        lg = np.log(y)
        s, c = np.sin(lg), np.cos(lg)
        out = [y ** e * (a * s + b * c)]
        for _ in range(q):
            a, b = e * a - b, e * b + a
            e -= 1.0
            out.append(y ** e * (a * s + b * c))
        return out

    def __repr__(self):
        return f"OutputShape({self.kind!r})"


SHAPE_ONE = OutputShape("one")
SHAPE_HS = OutputShape("hs")
SHAPE_HC = OutputShape("hc")
_SHAPES = {"one": SHAPE_ONE, "1": SHAPE_ONE, "hs": SHAPE_HS, "hc": SHAPE_HC}


def output_shape(spec):
    if isinstance(spec, OutputShape):
        return spec
    if spec is None or spec == 1:
        return SHAPE_ONE
    try:
        return _SHAPES[str(spec).lower()]
    except KeyError:
        raise ValueError(f"unknown output shape {spec!r}") from None


def hs(y):
    return SHAPE_HS.value(y)


def hc(y):
    return SHAPE_HC.value(y)


class OutputFeedbackField(VectorField):
    """Composed field f(t,x) = h(psi(x)) e(t,x).

    The value extends continuously by 0 where psi(x) <= 0 (the shapes vanish
    there); the derivative oracle exists only where psi(x) > 0 and raises
    otherwise — bracket evaluations must keep off the zero set.
    """

    def __init__(self, shape, e_field, psi, name=""):
        self.shape = output_shape(shape)
        self.e_field = e_field
        self.psi = psi
        super().__init__(e_field.n, self._fn, analytic=e_field.analytic,
                         name=name or f"{self.shape.kind}*{e_field.name}",
                         smoothness="smooth away from psi=0")

    def _fn(self, t, xs):  # float path only; jets go through .jet()
        w = self.shape.value(self.psi.fn(t, xs))
        return [w * c for c in self.e_field.fn(t, xs)]

    def jet(self, t, x, order):
        if self.shape.kind == "one":
            return self.e_field.jet(t, x, order)
        psi_jet = self.psi.jet(t, x, order)
        y0 = psi_jet.value
        if np.any(np.asarray(y0) <= 0.0):
            raise ValueError(
                f"output-feedback field {self.name} is nonsmooth at psi(x) "
                "<= 0; brackets are undefined on the zero set")
        h_jet = psi_jet.compose(self.shape.derivs(y0, order))
        return [h_jet * c for c in self.e_field.jet(t, x, order)]


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

class ControlAffineSystem:
    """dot x = f_0(t,x) + sum_i u_i f_i(t,x) with optional output psi >= 0.

    `controls` are the raw input fields e_1..e_m; when `psi` and `shapes`
    are present, `feedback_fields` composes f_i = h_i(psi) e_i.
    """

    def __init__(self, n, controls, drift=None, psi=None, shapes=None,
                 name=""):
        self.n = int(n)
        self.controls = list(controls)
        self.m = len(self.controls)
        if self.m < 1:
            raise ValueError("need at least one control field")
        for f in self.controls:
            if f.n != self.n:
                raise ValueError("control field dimension mismatch")
        self.drift = drift if drift is not None else zero_field(self.n)
        self.psi = psi
        self.shapes = ([output_shape(s) for s in shapes] if shapes is not None
                       else [SHAPE_ONE] * self.m)
        if len(self.shapes) != self.m:
            raise ValueError("need one shape per control channel")
        self.name = name

    def control(self, i):
        return self.controls[i - 1]

    def shape(self, i):
        return self.shapes[i - 1]

    def psi_value(self, x, t=0.0):
        if self.psi is None:
            raise ValueError("system has no output function")
        return self.psi.value(t, x)

    def feedback_fields(self):
        return output_feedback_fields(self)

    def __repr__(self):
        return f"ControlAffineSystem({self.name or 'anon'}, n={self.n}, m={self.m})"


def output_feedback_fields(sys):
    """Composed control fields f_i(t,x) = h_i(psi(x)) e_i(t,x)."""
    if sys.psi is None:
        raise ValueError("output-feedback composition needs an output function")
    out = []
    for i in range(1, sys.m + 1):
        shape = sys.shape(i)
        if shape.kind == "one":
            out.append(sys.control(i))
        else:
            out.append(OutputFeedbackField(shape, sys.control(i), sys.psi))
    return out


class ExtendedSystem:
    """Averaged limit dynamics f_0 + sum_{0<|I|<=r} (v_I(t)/|I|) [f_I](t,x)."""

    def __init__(self, base, v, fields, method="auto"):
        self.base = base
        self.v = v
        self.fields = list(fields)
        self.r = v.r
        self.method = method
        self._terms = [(I, len(I)) for I in v.indices()]

    def bracket_term(self, I, t, x):
        return iterated_bracket(self.fields, I, t, x, method=self.method)

    def rhs(self, t, x):
        x = np.asarray(x, dtype=float)
        out = self.base.drift(t, x)
        for I, ell in self._terms:
            coeff = self.v.coefficient(I)(t) / ell
            if coeff != 0.0:
                out = out + coeff * self.bracket_term(I, t, x)
        return out

    __call__ = rhs


def assemble_extended(sys, v, tol=1e-9, check_times=(0.0, 0.77), method="auto"):
    """Build the averaged limit system, refusing ill-formed coefficients.

    The polynomial input must satisfy the free-algebra identity
    sum v_I X_I = sum (v_I/|I|) [X_I] (checked at `check_times`, relative
    tolerance `tol`); otherwise the limit system is not well defined and the
    assembly raises instead of silently projecting.
    """
    if v.m != sys.m:
        raise ValueError(f"coefficient channels ({v.m}) != controls ({sys.m})")
    for t in check_times:
        sample = v.sample(t)
        scale = 1.0 + max((abs(c) for c in sample.values()), default=0.0)
        chk = v.check_lie_valued(t)
        if chk.residual > tol * scale:
            raise ValueError(
                "polynomial input is not Lie-element valued at t="
                f"{t:g} (identity residual {chk.residual:.3e}); refusing to "
                "assemble the limit system")
    fields = (output_feedback_fields(sys) if sys.psi is not None
              else list(sys.controls))
    return ExtendedSystem(sys, v, fields, method=method)


def verify_magic_bracket(sys, k, points, method="auto"):
    """Max relative residual of [f_{2k-1}, f_{2k}] = -(g_k psi) g_k on a grid.

    `points` is an iterable of (t, x) with psi(x) > 0; g_k is the shared
    carrier field e_{2k-1} = e_{2k}.  Residuals are measured as
    ||bracket + (g psi) g|| / (1 + ||(g psi) g||).
    """
    if sys.psi is None:
        raise ValueError("magic-bracket verification needs an output function")
    if not (1 <= 2 * k <= sys.m):
        raise ValueError(f"channel pair {2 * k - 1},{2 * k} out of range")
    fields = output_feedback_fields(sys)
    f_s, f_c = fields[2 * k - 2], fields[2 * k - 1]
    g = sys.control(2 * k - 1)
    worst = 0.0
    for (t, x) in points:
        x = np.asarray(x, dtype=float)
        if sys.psi.value(t, x) <= 0.0:
            raise ValueError(f"grid point with psi(x) <= 0 at x={x}")
        ref = -lie_derivative(g, sys.psi, t, x, method=method) * g(t, x)
        got = bracket_of_pair(f_s, f_c, t, x, method=method)
        worst = max(worst, float(np.linalg.norm(got - ref)
                                 / (1.0 + np.linalg.norm(ref))))
    return worst


# ---------------------------------------------------------------------------
# Increasing trees and the tree expansion of f_I alpha
# ---------------------------------------------------------------------------

MAX_TREE_ORDER = 6


def increasing_trees(ell):
    """All increasing trees on {0, 1, ..., ell}, as parent arrays.

    A tree is the tuple (parent(1), ..., parent(ell)) with parent(k) < k;
    the enumeration has exactly ell! members.
    """
    if not 1 <= ell <= MAX_TREE_ORDER:
        raise ValueError(f"tree order must be in 1..{MAX_TREE_ORDER}")
    return list(itertools.product(*(range(k) for k in range(1, ell + 1))))


def set_partitions(items):
    """All partitions of a list into nonempty blocks (ordered canonically)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for q in range(len(part)):
            yield part[:q] + [[first] + part[q]] + part[q + 1:]
        yield [[first]] + part


def nested_scalar_derivative(fields, J, phi, t, x, method="auto"):
    """Iterated Lie derivative e_J phi = e_{j_1}(e_{j_2}(... e_{j_q} phi)).

    The analytic route peels one derivative per jet order; the FD route nests
    directional differences of closures.
    """
    fmap = _fields_map(fields)
    J = tuple(J)
    x = np.asarray(x, dtype=float)
    if not J:
        return phi.value(t, x)
    if method == "auto":
        method = ("jet" if phi.analytic
                  and all(fmap[i].analytic for i in set(J)) else "fd")
    if method == "jet":
        q = len(J)
        acc = phi.jet(t, x, q)
        jets = {i: fmap[i].jet(t, x, q - 1) for i in set(J)}
        for idx in reversed(J):
            comps = jets[idx]
            term = None
            for k in range(len(comps)):
                piece = comps[k] * acc.partial(k)
                term = piece if term is None else term + piece
            acc = term
        return acc.value
    if method == "fd":
        def closure(sub):
            if not sub:
                return lambda tt, xx: phi.value(tt, xx)
            inner = closure(sub[1:])
            field = fmap[sub[0]]

            def call(tt, xx, inner=inner, field=field, depth=len(sub)):
                v = field(tt, xx)
                norm = float(np.linalg.norm(v))
                if norm == 0.0:
                    return 0.0
                step = (_fd_level_step(depth)
                        * (1.0 + float(np.linalg.norm(xx))) / norm)
                return float(_richardson_directional(
                    lambda p: inner(tt, p), np.asarray(xx, float), v, step))

            return call

        return float(closure(J)(t, x))
    raise ValueError(f"unknown method {method!r}")


def nested_lie_derivative(fields, I, alpha, t, x, method="auto"):
    """Direct route for f_I alpha: nested scalar Lie derivatives of alpha
    along the (possibly composed) fields, outermost index first."""
    return nested_scalar_derivative(fields, tuple(I), alpha, t, x,
                                    method=method)


def _shape_composition_derivative(shape, psi, e_fields, node_channels, t, x,
                                  method):
    """e_{I<S>}(h o psi) by the set-partition (Faa di Bruno) formula.

    `node_channels` lists (node label k, channel i_k) for S in increasing
    node order; nested psi-derivatives apply the largest label outermost.
    """
    y0 = psi.value(t, x)
    q = len(node_channels)
    derivs = shape.derivs(y0, q)
    total = 0.0
    for part in set_partitions(list(range(q))):
        prod = derivs[len(part)]
        for block in part:
            labels = sorted(block)
            J = tuple(node_channels[pos][1] for pos in reversed(labels))
            prod *= nested_scalar_derivative(e_fields, J, psi, t, x,
                                             method=method)
        total += prod
    return total


def tree_expansion_lie_derivative(e_fields, shapes, psi, alpha, I, t, x,
                                  method="auto"):
    """f_I alpha via the sum over increasing trees on {0, ..., |I|}.

    Nodes 1..l carry the channels of I innermost-first; each tree contributes
    (e_{I<children(0)>} alpha) * prod_k e_{I<children(k)>}(h_{i_k} o psi),
    with empty children sets contributing the bare shape value and nonempty
    ones evaluated through the set-partition formula.  Valid on psi > 0 only.
    """
    I = tuple(I)
    ell = len(I)
    if not 1 <= ell <= 4:
        raise ValueError("tree expansion supported for 1 <= |I| <= 4")
    x = np.asarray(x, dtype=float)
    if psi.value(t, x) <= 0.0:
        raise ValueError("tree expansion is only valid where psi(x) > 0")
    fmap = _fields_map(e_fields)
    shape_map = {i: output_shape(s) for i, s in
                 (shapes.items() if isinstance(shapes, dict)
                  else enumerate(shapes, start=1))}
    # node k in 1..l carries channel c_k = I reversed (innermost index first)
    chan = {k: I[ell - k] for k in range(1, ell + 1)}
    y0 = psi.value(t, x)

    total = 0.0
    for parents in increasing_trees(ell):
        kids = {k: [] for k in range(ell + 1)}
        for node in range(1, ell + 1):
            kids[parents[node - 1]].append(node)
        J_alpha = tuple(chan[s] for s in reversed(kids[0]))
        term = nested_scalar_derivative(fmap, J_alpha, alpha, t, x,
                                        method=method)
        for k in range(1, ell + 1):
            if term == 0.0:
                break
            shape = shape_map[chan[k]]
            if not kids[k]:
                term *= shape.value(y0)
            else:
                node_channels = [(s, chan[s]) for s in kids[k]]
                term *= _shape_composition_derivative(
                    shape, psi, fmap, node_channels, t, x, method)
        total += term
    return total
