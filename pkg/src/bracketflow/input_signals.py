"""Oscillatory input families, their averaged limits, and difference bookkeeping.

This module houses the open-loop side of the toolkit: ordinary inputs
``u = (u_1, ..., u_m)``, polynomial inputs ``v = (v_I)_{0<|I|<=r}`` indexed by
multi-indices, and the generalized differences ``W_I`` that couple a
high-frequency input sequence to its averaged limit through the recursion

    d/dt W_i   = v_i  - u_i,
    d/dt W_iI  = v_iI - u_i * W_I.

A sequence u^j converges (in the generalized-difference sense of order r) to a
polynomial input v when, for some admissible choices v^j and W^j,

    c1: sup_t |v^j_I - v_I|      -> 0   for all 0 < |I| <= r,
    c2: sup_t |W^j_I|            -> 0   for all 0 < |I| <= r,
    c3: sup_t |u^j_i * W^j_I|    -> 0   for |I| = r and all i.

Everything here is descriptor-based: signals are small immutable trees
(constants, sinusoids, sawtooth waves, periodic piecewise polynomials, sums,
products, bounded callables) so that sup-norms over all of R can be bounded or
computed exactly from the structure instead of trusted to sampling.

Three concrete input families are provided, matching the simulation scenarios:

* a sinusoid dither family (amplitude ~ sqrt(j)) whose limit coefficients are
  the antisymmetric pair +/- lambda_k on the index pairs (2k-1, 2k);
* a phase-shifted sawtooth family (amplitude 10*sqrt(j/pi)) whose exact limit
  coefficients are +/- 25/(8*pi);
* a three-channels-per-agent unicycle family (amplitude ~ j^(3/4)) built on
  frequency ladders sqrt(kappa)*(3+2*sqrt(2), 1, 2+sqrt(2)) over pairwise
  distinct primes kappa, with constant fourth-order limit coefficients.

For each family the canonical closed-form pair (v^j, W^j) is constructed
explicitly, and `integrate_generalized_difference` provides the independent
numerical route used to cross-check the closed forms.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .free_algebra import (
    MultiIndex,
    Radical,
    all_multi_indices,
    check_algebraic_identity,
    first_primes,
)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Signal descriptors
# ---------------------------------------------------------------------------

class Signal:
    """A bounded time signal described by a small immutable expression tree.

    Subclasses implement `_eval` (vectorized over numpy arrays), `sup_norm`
    (a certified bound on sup_{t in R} |s(t)|, exact for the leaf types and
    for products with stated coefficient bounds), `period` and, where it is
    well defined, `derivative`.
    """

    def __call__(self, t):
        arr = np.asarray(t, dtype=float)
        out = np.asarray(self._eval(arr), dtype=float)
        if np.ndim(t) == 0:
            return float(out)
        return out

    def _eval(self, t):
        raise NotImplementedError

    def sup_norm(self):
        raise NotImplementedError

    def period(self):
        """Period in seconds; 0.0 means constant (any period), None unknown."""
        return None

    def derivative(self):
        raise ValueError(f"{type(self).__name__} has no descriptor derivative")


class Constant(Signal):
    def __init__(self, value):
        self.value = float(value)

    def _eval(self, t):
        return np.full_like(t, self.value, dtype=float)

    def sup_norm(self):
        return abs(self.value)

    def period(self):
        return 0.0

    def derivative(self):
        return Constant(0.0)

    def __repr__(self):
        return f"Constant({self.value!r})"


class Sinusoid(Signal):
    """amplitude * cos(omega*t + phase); negative omega is normalized away."""

    def __init__(self, amplitude, omega, phase=0.0):
        omega = float(omega)
        phase = float(phase)
        if omega < 0.0:
            omega, phase = -omega, -phase
        self.amplitude = float(amplitude)
        self.omega = omega
        self.phase = phase

    def _eval(self, t):
        return self.amplitude * np.cos(self.omega * t + self.phase)

    def sup_norm(self):
        if self.omega == 0.0:
            return abs(self.amplitude * math.cos(self.phase))
        return abs(self.amplitude)

    def period(self):
        return TWO_PI / self.omega if self.omega > 0.0 else 0.0

    def derivative(self):
        return Sinusoid(self.amplitude * self.omega, self.omega,
                        self.phase + 0.5 * math.pi)

    def __repr__(self):
        return f"Sinusoid({self.amplitude:.6g}, {self.omega:.6g}, {self.phase:.6g})"


def sawtooth_wave(t):
    """saw(t) = 2*(t - floor(t)) - 1, the right-continuous unit sawtooth."""
    t = np.asarray(t, dtype=float)
    out = 2.0 * (t - np.floor(t)) - 1.0
    return float(out) if out.ndim == 0 else out


class Sawtooth(Signal):
    """amplitude * saw(freq*t + phase) with saw as above; jumps at freq*t+phase in Z."""

    def __init__(self, amplitude, freq, phase=0.0):
        if freq <= 0.0:
            raise ValueError("sawtooth frequency must be positive")
        self.amplitude = float(amplitude)
        self.freq = float(freq)
        self.phase = float(phase)

    def _eval(self, t):
        x = self.freq * t + self.phase
        return self.amplitude * (2.0 * (x - np.floor(x)) - 1.0)

    def sup_norm(self):
        return abs(self.amplitude)

    def period(self):
        return 1.0 / self.freq

    def __repr__(self):
        return f"Sawtooth({self.amplitude:.6g}, {self.freq:.6g}, {self.phase:.6g})"


class PiecewisePeriodic(Signal):
    """scale * p(frac(freq*t + phase)) with p piecewise polynomial on [0, 1).

    `breaks` is an increasing array 0 = b_0 < ... < b_n = 1 and `pieces[i]`
    holds ascending polynomial coefficients valid on [b_i, b_{i+1}).  Used for
    the exact closed-form difference coefficients of the sawtooth family.
    """

    def __init__(self, freq, phase, breaks, pieces, scale=1.0):
        if freq <= 0.0:
            raise ValueError("frequency must be positive")
        self.freq = float(freq)
        self.phase = float(phase)
        self.breaks = np.asarray(breaks, dtype=float)
        self.pieces = [np.asarray(c, dtype=float) for c in pieces]
        self.scale = float(scale)
        if len(self.pieces) != len(self.breaks) - 1:
            raise ValueError("need one polynomial per break interval")

    def _eval(self, t):
        tau = np.mod(self.freq * t + self.phase, 1.0)
        idx = np.clip(np.searchsorted(self.breaks, tau, side="right") - 1,
                      0, len(self.pieces) - 1)
        out = np.zeros_like(tau)
        for i, coeffs in enumerate(self.pieces):
            mask = idx == i
            if np.any(mask):
                out[mask] = np.polynomial.polynomial.polyval(tau[mask], coeffs)
        return self.scale * out

    def sup_norm(self):
        best = 0.0
        for i, coeffs in enumerate(self.pieces):
            lo, hi = self.breaks[i], self.breaks[i + 1]
            cand = [lo, hi]
            if len(coeffs) > 2:
                dcoef = coeffs[1:] * np.arange(1, len(coeffs))
                roots = np.roots(dcoef[::-1])
                for rt in roots:
                    if abs(rt.imag) < 1e-12 and lo <= rt.real <= hi:
                        cand.append(rt.real)
            vals = np.polynomial.polynomial.polyval(np.asarray(cand), coeffs)
            best = max(best, float(np.max(np.abs(vals))))
        return abs(self.scale) * best

    def period(self):
        return 1.0 / self.freq

    def derivative(self):
        dpieces = []
        for coeffs in self.pieces:
            if len(coeffs) > 1:
                dpieces.append(coeffs[1:] * np.arange(1, len(coeffs)))
            else:
                dpieces.append(np.zeros(1))
        return PiecewisePeriodic(self.freq, self.phase, self.breaks, dpieces,
                                 self.scale * self.freq)

    def __repr__(self):
        return (f"PiecewisePeriodic(freq={self.freq:.6g}, "
                f"pieces={len(self.pieces)}, scale={self.scale:.6g})")


class Sum(Signal):
    def __init__(self, parts):
        flat = []
        for p in parts:
            p = as_signal(p)
            if isinstance(p, Sum):
                flat.extend(p.parts)
            elif isinstance(p, Constant) and p.value == 0.0:
                continue
            else:
                flat.append(p)
        self.parts = tuple(flat) if flat else (Constant(0.0),)

    def _eval(self, t):
        out = np.zeros_like(t)
        for p in self.parts:
            out = out + p._eval(t)
        return out

    def sup_norm(self):
        # triangle inequality; exact for a single part
        return sum(p.sup_norm() for p in self.parts)

    def period(self):
        return common_period([p.period() for p in self.parts])

    def derivative(self):
        return Sum([p.derivative() for p in self.parts])

    def __repr__(self):
        return f"Sum({list(self.parts)!r})"


class Product(Signal):
    def __init__(self, factors):
        flat = []
        for f in factors:
            f = as_signal(f)
            if isinstance(f, Product):
                flat.extend(f.factors)
            elif isinstance(f, Constant) and f.value == 1.0:
                continue
            else:
                flat.append(f)
        self.factors = tuple(flat) if flat else (Constant(1.0),)

    def _eval(self, t):
        out = np.ones_like(t)
        for f in self.factors:
            out = out * f._eval(t)
        return out

    def sup_norm(self):
        # product of factor bounds (the stated-bound rule for modulated carriers)
        out = 1.0
        for f in self.factors:
            out *= f.sup_norm()
        return out

    def period(self):
        return common_period([f.period() for f in self.factors])

    def derivative(self):
        terms = []
        for i in range(len(self.factors)):
            d = self.factors[i].derivative()
            if isinstance(d, Constant) and d.value == 0.0:
                continue
            terms.append(Product(self.factors[:i] + (d,) + self.factors[i + 1:]))
        return Sum(terms) if terms else Constant(0.0)

    def __repr__(self):
        return f"Product({list(self.factors)!r})"


class Lam(Signal):
    """A coefficient supplied as a callable together with a stated sup bound.

    The bound is taken on trust and used verbatim by `sup_norm`; pass a
    `derivative_fn`/`derivative_bound` pair when closed-form constructions
    need the time derivative.
    """

    def __init__(self, fn, bound, derivative_fn=None, derivative_bound=None,
                 label="lam"):
        if bound < 0:
            raise ValueError("stated bound must be nonnegative")
        self.fn = fn
        self.bound = float(bound)
        self.derivative_fn = derivative_fn
        self.derivative_bound = derivative_bound
        self.label = label

    def _eval(self, t):
        try:
            out = np.asarray(self.fn(t), dtype=float)
            if out.shape == t.shape:
                return out
        except Exception:
            pass
        flat = np.asarray([self.fn(x) for x in np.atleast_1d(t).ravel()])
        return flat.reshape(np.shape(t))

    def sup_norm(self):
        return self.bound

    def period(self):
        return None

    def derivative(self):
        if self.derivative_fn is None:
            raise ValueError(f"Lam({self.label}) has no derivative callable")
        return Lam(self.derivative_fn, self.derivative_bound,
                   label=self.label + "'")

    def __repr__(self):
        return f"Lam({self.label}, bound={self.bound:.6g})"


def as_signal(x):
    """Coerce numbers to Constant; callables must be wrapped in Lam explicitly."""
    if isinstance(x, Signal):
        return x
    if isinstance(x, (int, float, Fraction)):
        return Constant(float(x))
    raise TypeError(
        f"expected a Signal or a number, got {type(x).__name__}; "
        "wrap bare callables in Lam(fn, bound)")


def scaled(sig, c):
    """c * sig with descriptor simplification for the common leaf types."""
    sig = as_signal(sig)
    c = float(c)
    if c == 1.0:
        return sig
    if isinstance(sig, Constant):
        return Constant(c * sig.value)
    if isinstance(sig, Sinusoid):
        if c >= 0.0:
            return Sinusoid(c * sig.amplitude, sig.omega, sig.phase)
        return Sinusoid(-c * sig.amplitude, sig.omega, sig.phase + math.pi)
    if isinstance(sig, PiecewisePeriodic):
        return PiecewisePeriodic(sig.freq, sig.phase, sig.breaks, sig.pieces,
                                 c * sig.scale)
    return Product([Constant(c), sig])


def common_period(periods):
    """Smallest common period of the given periods (0.0 = constant, None = unknown).

    Period ratios are recognized as rational up to denominator 10^4 with a
    1e-9 relative check; irrational ratios (whose convergents that accurate
    need larger denominators) come back as None.
    """
    acc = 0.0
    for p in periods:
        if p is None:
            return None
        if p == 0.0:
            continue
        if acc == 0.0:
            acc = p
            continue
        ratio = Fraction(p / acc).limit_denominator(10 ** 4)
        if ratio == 0:
            return None
        cand = acc * ratio.numerator
        if not math.isclose(cand, p * ratio.denominator, rel_tol=1e-9):
            return None
        acc = cand
    return acc


# ---------------------------------------------------------------------------
# Input containers
# ---------------------------------------------------------------------------

class OrdinaryInput:
    """m bounded channels u_1..u_m; channel numbering is 1-based."""

    def __init__(self, channels):
        self.channels = tuple(as_signal(c) for c in channels)
        self.m = len(self.channels)
        if self.m < 1:
            raise ValueError("need at least one channel")
        for k, c in enumerate(self.channels, start=1):
            if not math.isfinite(c.sup_norm()):
                raise ValueError(f"channel {k} has unbounded sup-norm")

    def channel(self, i):
        return self.channels[i - 1]

    def evaluate(self, t):
        """Stack of channel values; shape (m,) for scalar t, (m, len(t)) else."""
        arr = np.asarray(t, dtype=float)
        return np.stack([np.asarray(c._eval(arr), dtype=float)
                         for c in self.channels])

    def periods(self):
        return [c.period() for c in self.channels]

    def common_period(self):
        return common_period(self.periods())

    def __repr__(self):
        return f"OrdinaryInput(m={self.m})"


class PolynomialInput:
    """Sparse map of multi-indices 0<|I|<=r to coefficient signals v_I."""

    def __init__(self, m, r, coeffs=None):
        self.m = int(m)
        self.r = int(r)
        if self.m < 1 or self.r < 1:
            raise ValueError("need m >= 1 and r >= 1")
        self.coeffs = {}
        for key, sig in (coeffs or {}).items():
            I = key if isinstance(key, MultiIndex) else MultiIndex(key, self.m)
            if I.m != self.m:
                raise ValueError(f"index {I} does not match m={self.m}")
            if not 0 < len(I) <= self.r:
                raise ValueError(f"index {I} outside 0 < |I| <= {self.r}")
            sig = as_signal(sig)
            if isinstance(sig, Constant) and sig.value == 0.0:
                continue
            self.coeffs[I] = sig

    def coefficient(self, key):
        I = key if isinstance(key, MultiIndex) else MultiIndex(key, self.m)
        return self.coeffs.get(I, Constant(0.0))

    def indices(self):
        return sorted(self.coeffs)

    def sample(self, t):
        """Numeric coefficient map at time t (support only)."""
        return {I: sig(t) for I, sig in self.coeffs.items()}

    def check_lie_valued(self, t):
        """Exact algebraic-identity check of the sampled coefficients at time t."""
        return check_algebraic_identity(self.sample(t), self.r, m=self.m)

    def __repr__(self):
        return f"PolynomialInput(m={self.m}, r={self.r}, nnz={len(self.coeffs)})"


class GridFunction:
    """Sampled signal on a time grid with linear interpolation in between."""

    def __init__(self, ts, ys):
        self.ts = np.asarray(ts, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        if self.ts.ndim != 1 or self.ts.shape != self.ys.shape:
            raise ValueError("ts and ys must be matching 1-d arrays")

    def __call__(self, t):
        out = np.interp(np.asarray(t, dtype=float), self.ts, self.ys)
        return float(out) if np.ndim(t) == 0 else out

    def sup_on(self, t0, t1):
        mask = (self.ts >= t0 - 1e-12) & (self.ts <= t1 + 1e-12)
        if not np.any(mask):
            return 0.0
        return float(np.max(np.abs(self.ys[mask])))

    def __repr__(self):
        return f"GridFunction(n={len(self.ts)})"


class GeneralizedDifference:
    """Difference coefficients W_I for 0<|I|<=r, closed-form or integrated."""

    def __init__(self, m, r, entries, provenance):
        if provenance not in ("closed-form", "integrated"):
            raise ValueError("provenance must be 'closed-form' or 'integrated'")
        self.m = int(m)
        self.r = int(r)
        self.provenance = provenance
        self.entries = {}
        for key, val in entries.items():
            I = key if isinstance(key, MultiIndex) else MultiIndex(key, self.m)
            if not 0 < len(I) <= self.r:
                raise ValueError(f"index {I} outside 0 < |I| <= {self.r}")
            self.entries[I] = val

    def entry(self, key):
        I = key if isinstance(key, MultiIndex) else MultiIndex(key, self.m)
        return self.entries.get(I, Constant(0.0))

    def value(self, key, t):
        return self.entry(key)(t)

    def values_at(self, t):
        return {I: e(t) for I, e in self.entries.items()}

    def indices(self):
        return sorted(self.entries)

    def __repr__(self):
        return (f"GeneralizedDifference(m={self.m}, r={self.r}, "
                f"{self.provenance}, entries={len(self.entries)})")


# ---------------------------------------------------------------------------
# Harmonic bookkeeping for the closed-form constructions
# ---------------------------------------------------------------------------
#
# A closed-form signal is assembled as a finite sum of terms
#     coef * prod(env)(t) * exp(1j * freq * t),
# with complex coef, real frequency, and a tuple of real envelope signals
# (slow coefficients and their derivatives).  The assembled totals are real
# because terms occur in conjugate families, so taking the real part term by
# term reproduces the sum exactly.

class _Harm:
    __slots__ = ("coef", "freq", "env")

    def __init__(self, coef, freq, env=()):
        self.coef = complex(coef)
        self.freq = float(freq)
        self.env = tuple(env)


def _env_key(env):
    return tuple(id(s) for s in env)


def _env_derivative(env):
    """Product-rule expansion of d/dt prod(env); zero factors are dropped."""
    out = []
    for i, factor in enumerate(env):
        d = factor.derivative()
        if isinstance(d, Constant) and d.value == 0.0:
            continue
        out.append(env[:i] + (d,) + env[i + 1:])
    return out


def _harmonics_to_signal(terms):
    """Real signal equal to sum of Re(coef * prod(env) * e^{i freq t})."""
    merged = {}
    for h in terms:
        if h.coef == 0:
            continue
        if any(isinstance(e, Constant) and e.value == 0.0 for e in h.env):
            continue
        env = tuple(e for e in h.env
                    if not (isinstance(e, Constant) and e.value == 1.0))
        freq, coef = h.freq, h.coef
        if freq < 0.0:
            freq, coef = -freq, coef.conjugate()
        key = (freq, _env_key(env))
        prev = merged.get(key)
        merged[key] = (coef + prev[0], env) if prev else (coef, env)
    parts = []
    for (freq, _), (coef, env) in sorted(merged.items(), key=lambda kv: kv[0][0]):
        if freq == 0.0:
            if coef.real == 0.0:
                continue
            base = Constant(coef.real)
        else:
            if abs(coef) == 0.0:
                continue
            base = Sinusoid(abs(coef), freq, math.atan2(coef.imag, coef.real))
        parts.append(base if not env else Product(env + (base,)))
    if not parts:
        return Constant(0.0)
    if len(parts) == 1:
        return parts[0]
    return Sum(parts)


# ---------------------------------------------------------------------------
# Sinusoid dither family (order 2)
# ---------------------------------------------------------------------------

def _validate_omegas(omegas):
    omegas = [float(w) for w in omegas]
    if not omegas:
        raise ValueError("need at least one frequency")
    if any(w <= 0.0 for w in omegas):
        raise ValueError("frequencies must be positive")
    if len(set(omegas)) != len(omegas):
        raise ValueError("frequencies must be pairwise distinct")
    return omegas


def make_sinusoid_inputs(omegas, lambdas, j):
    """Dither channels u_{2k-1} = sqrt(2 w_k j) lam_k(t) cos(w_k j t),
    u_{2k} = sqrt(2 w_k j) sin(w_k j t)."""
    omegas = _validate_omegas(omegas)
    if len(lambdas) != len(omegas):
        raise ValueError("need one coefficient per frequency")
    channels = []
    for w, lam in zip(omegas, lambdas):
        lam = as_signal(lam)
        amp = math.sqrt(2.0 * w * j)
        carrier_cos = Sinusoid(amp, w * j, 0.0)
        if isinstance(lam, Constant):
            channels.append(scaled(carrier_cos, lam.value))
        else:
            channels.append(Product([lam, carrier_cos]))
        channels.append(Sinusoid(amp, w * j, -0.5 * math.pi))
    return OrdinaryInput(channels)


def _sinusoid_eta(omegas, lambdas):
    """Per channel: list of (signed frequency, complex coefficient, envelope)."""
    eta = {}
    for k, (w, lam) in enumerate(zip(omegas, lambdas)):
        a = math.sqrt(2.0 * w) / 2.0
        lam = as_signal(lam)
        eta[2 * k + 1] = [(+w, complex(a), (lam,)), (-w, complex(a), (lam,))]
        eta[2 * k + 2] = [(+w, -1j * a, ()), (-w, +1j * a, ())]
    return eta


def closed_form_sinusoid_gd(omegas, lambdas, j):
    """Canonical order-2 pair (v^j, W^j) for the sinusoid dither family.

    Built by two rounds of integration by parts on the complex-exponential
    form of the channels: first order

        v^j_l = -j^{-1/2} sum_w  d/dt(eta_{w,l}) e^{i j w t} / (i w),
        W^j_l = -j^{-1/2} sum_w  eta_{w,l}       e^{i j w t} / (i w),

    and second order, splitting resonant pairs (w + w' = 0, which form the
    j-independent limit part) from non-resonant ones (which carry the 1/j
    remainder).  With constant lam the first-order v^j vanish identically and
    the second-order v^j agree with the limit coefficients to roundoff.

    Returns
    -------
    (PolynomialInput, GeneralizedDifference) of order 2 over m = 2p channels.
    """
    omegas = _validate_omegas(omegas)
    if len(lambdas) != len(omegas):
        raise ValueError("need one coefficient per frequency")
    lambdas = [as_signal(l) for l in lambdas]
    for lam in lambdas:
        lam.derivative()  # fail early if a coefficient lacks a derivative
    p = len(omegas)
    m = 2 * p
    jf = float(j)
    jsq = math.sqrt(jf)
    eta = _sinusoid_eta(omegas, lambdas)

    v_entries = {}
    w_entries = {}

    for ch in range(1, m + 1):
        wterms, vterms = [], []
        for (w, c, env) in eta[ch]:
            base = -c / (1j * w * jsq)
            wterms.append(_Harm(base, jf * w, env))
            for denv in _env_derivative(env):
                vterms.append(_Harm(base, jf * w, denv))
        I = MultiIndex((ch,), m)
        w_entries[I] = _harmonics_to_signal(wterms)
        vsig = _harmonics_to_signal(vterms)
        if not (isinstance(vsig, Constant) and vsig.value == 0.0):
            v_entries[I] = vsig

    for l1 in range(1, m + 1):
        for l2 in range(1, m + 1):
            wterms, vterms = [], []
            for (w1, c1, env1) in eta[l1]:
                for (w2, c2, env2) in eta[l2]:
                    env = env1 + env2
                    if w1 + w2 == 0.0:
                        vterms.append(_Harm(-(c1 * c2) / (1j * w2), 0.0, env))
                        continue
                    denom = -(w2 * (w1 + w2))  # i^2 * w' * (w + w')
                    base = (c1 * c2) / denom / jf
                    wterms.append(_Harm(base, jf * (w1 + w2), env))
                    for denv in _env_derivative(env):
                        vterms.append(_Harm(base, jf * (w1 + w2), denv))
            I = MultiIndex((l1, l2), m)
            w_entries[I] = _harmonics_to_signal(wterms)
            vsig = _harmonics_to_signal(vterms)
            if not (isinstance(vsig, Constant) and vsig.value == 0.0):
                v_entries[I] = vsig

    return (PolynomialInput(m, 2, v_entries),
            GeneralizedDifference(m, 2, w_entries, "closed-form"))


def sinusoid_limit_coefficients(omegas, lambdas):
    """Limit coefficients of the sinusoid family: +lam_k at (2k-1, 2k),
    -lam_k at (2k, 2k-1), zero elsewhere."""
    omegas = _validate_omegas(omegas)
    if len(lambdas) != len(omegas):
        raise ValueError("need one coefficient per frequency")
    m = 2 * len(omegas)
    coeffs = {}
    for k, lam in enumerate(lambdas):
        lam = as_signal(lam)
        coeffs[MultiIndex((2 * k + 1, 2 * k + 2), m)] = lam
        coeffs[MultiIndex((2 * k + 2, 2 * k + 1), m)] = scaled(lam, -1.0)
    return PolynomialInput(m, 2, coeffs)


# ---------------------------------------------------------------------------
# Sawtooth family (order 2, exact piecewise-polynomial calculus)
# ---------------------------------------------------------------------------

SAWTOOTH_AMPLITUDE = 10.0  # amplitude prefactor 10*sqrt(j/pi)
_SAW_PHASES = (Fraction(1, 4), Fraction(0))  # channel 1 leads channel 2


def make_sawtooth_inputs(j):
    """Two phase-shifted sawtooth channels u_1 = 10 sqrt(j/pi) saw(j t + 1/4),
    u_2 = 10 sqrt(j/pi) saw(j t)."""
    if j < 1:
        raise ValueError("sequence index must be >= 1")
    amp = SAWTOOTH_AMPLITUDE * math.sqrt(j / math.pi)
    return OrdinaryInput([Sawtooth(amp, float(j), float(_SAW_PHASES[0])),
                          Sawtooth(amp, float(j), float(_SAW_PHASES[1]))])


def _poly_add(a, b):
    n = max(len(a), len(b))
    return [ (a[i] if i < len(a) else 0) + (b[i] if i < len(b) else 0)
             for i in range(n) ]


def _poly_mul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        for k, bk in enumerate(b):
            out[i + k] += ai * bk
    return out


def _poly_shift(coeffs, c):
    """Coefficients of p(x + c) from those of p, exactly (Horner in (x + c))."""
    res = [Fraction(0)]
    for a in reversed(coeffs):
        res = _poly_add(_poly_mul(res, [c, Fraction(1)]), [Fraction(a)])
    return res


def _poly_eval(coeffs, x):
    acc = Fraction(0)
    for a in reversed(coeffs):
        acc = acc * x + a
    return acc


class _FracPieces:
    """Exact piecewise polynomial on [0, 1) with Fraction breaks/coefficients."""

    def __init__(self, breaks, polys):
        self.breaks = [Fraction(b) for b in breaks]
        self.polys = [[Fraction(c) for c in p] for p in polys]
        assert self.breaks[0] == 0 and self.breaks[-1] == 1
        assert len(self.polys) == len(self.breaks) - 1

    @staticmethod
    def saw():
        return _FracPieces([0, 1], [[-1, 2]])

    def _piece_at(self, x):
        for q in range(len(self.polys)):
            if self.breaks[q] <= x < self.breaks[q + 1]:
                return q
        raise ValueError(f"{x} outside [0,1)")

    def eval(self, x):
        x = Fraction(x) % 1
        return _poly_eval(self.polys[self._piece_at(x)], x)

    def shifted(self, phi):
        """q(x) = p((x + phi) mod 1), exactly re-broken."""
        phi = Fraction(phi) % 1
        cuts = sorted({Fraction(0), Fraction(1),
                       *(((b - phi) % 1) for b in self.breaks[:-1])})
        polys = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            mid = (a + b) / 2
            src = (mid + phi) % 1
            q = self._piece_at(src)
            offset = phi if a + phi < 1 else phi - 1
            polys.append(_poly_shift(self.polys[q], offset))
        return _FracPieces(cuts, polys)

    def _aligned(self, other):
        cuts = sorted(set(self.breaks) | set(other.breaks))
        def refine(fp):
            out = []
            for a, b in zip(cuts[:-1], cuts[1:]):
                out.append(fp.polys[fp._piece_at((a + b) / 2)])
            return out
        return cuts, refine(self), refine(other)

    def __mul__(self, other):
        cuts, mine, theirs = self._aligned(other)
        return _FracPieces(cuts, [_poly_mul(p, q) for p, q in zip(mine, theirs)])

    def __add__(self, other):
        cuts, mine, theirs = self._aligned(other)
        return _FracPieces(cuts, [_poly_add(p, q) for p, q in zip(mine, theirs)])

    def mean(self):
        total = Fraction(0)
        for q, p in enumerate(self.polys):
            P = [Fraction(0)] + [c / (k + 1) for k, c in enumerate(p)]
            total += _poly_eval(P, self.breaks[q + 1]) - _poly_eval(P, self.breaks[q])
        return total

    def mean_free(self):
        mu = self.mean()
        polys = [_poly_add(p, [-mu]) for p in self.polys]
        return _FracPieces(self.breaks, polys)

    def antiderivative(self):
        """Continuous antiderivative with F(0) = 0 (periodic iff mean-free)."""
        polys = []
        carry = Fraction(0)
        for q, p in enumerate(self.polys):
            P = [Fraction(0)] + [c / (k + 1) for k, c in enumerate(p)]
            const = carry - _poly_eval(P, self.breaks[q])
            polys.append(_poly_add(P, [const]))
            carry = _poly_eval(polys[-1], self.breaks[q + 1])
        return _FracPieces(self.breaks, polys)

    def to_signal(self, freq, scale, phase=0.0):
        return PiecewisePeriodic(freq, phase,
                                 [float(b) for b in self.breaks],
                                 [[float(c) for c in p] for p in self.polys],
                                 scale)


def sawtooth_limit_coefficients():
    """Exact limit coefficients of the sawtooth family: +/- 25/(8 pi) on the
    off-diagonal index pairs, zero first-order and diagonal coefficients."""
    saw = _FracPieces.saw()
    tilted = {phi: saw.shifted(phi) for phi in _SAW_PHASES}
    ramps = {phi: tilted[phi].antiderivative().mean_free() for phi in _SAW_PHASES}
    coeffs = {}
    scale = -(SAWTOOTH_AMPLITUDE ** 2) / math.pi
    for a, phi_a in enumerate(_SAW_PHASES, start=1):
        for b, phi_b in enumerate(_SAW_PHASES, start=1):
            mu = (tilted[phi_a] * ramps[phi_b]).mean()
            if mu != 0:
                coeffs[MultiIndex((a, b), 2)] = Constant(scale * float(mu))
    return PolynomialInput(2, 2, coeffs)


def closed_form_sawtooth_gd(j):
    """Canonical order-2 pair (v^j, W^j) for the sawtooth family, exact.

    The first-order coefficients W^j_i are rescaled mean-free antiderivatives
    of the sawtooth channels; the products u^j_a W^j_b are j-independent
    periodic piecewise cubics whose means give the (constant, j-independent)
    second-order coefficients v^j_ab, and whose mean-free antiderivatives give
    W^j_ab up to a 1/j factor.  All piece coefficients are computed in exact
    rational arithmetic before conversion to float descriptors.
    """
    if j < 1:
        raise ValueError("sequence index must be >= 1")
    jf = float(j)
    amp = SAWTOOTH_AMPLITUDE * math.sqrt(jf / math.pi)
    saw = _FracPieces.saw()
    tilted = {phi: saw.shifted(phi) for phi in _SAW_PHASES}
    ramps = {phi: tilted[phi].antiderivative().mean_free() for phi in _SAW_PHASES}

    v_entries = {}
    w_entries = {}
    for a, phi_a in enumerate(_SAW_PHASES, start=1):
        w_entries[MultiIndex((a,), 2)] = ramps[phi_a].to_signal(jf, -amp / jf)
    # = -amp^2/j, but written j-free so v^j matches the limit bit-for-bit
    prod_scale = -(SAWTOOTH_AMPLITUDE ** 2) / math.pi
    for a, phi_a in enumerate(_SAW_PHASES, start=1):
        for b, phi_b in enumerate(_SAW_PHASES, start=1):
            prod = tilted[phi_a] * ramps[phi_b]
            mu = prod.mean()
            if mu != 0:
                v_entries[MultiIndex((a, b), 2)] = Constant(prod_scale * float(mu))
            wiggle = prod.mean_free().antiderivative().mean_free()
            w_entries[MultiIndex((a, b), 2)] = wiggle.to_signal(
                jf, -prod_scale / jf)
    return (PolynomialInput(2, 2, v_entries),
            GeneralizedDifference(2, 2, w_entries, "closed-form"))


# ---------------------------------------------------------------------------
# Unicycle family (order 4)
# ---------------------------------------------------------------------------

UNICYCLE_RATIO_EXPONENT = 13.0 / 8.0  # third-channel amplitude boost 2^(13/8)


def unicycle_frequencies_exact(N):
    """Exact per-agent frequency triples over the basis {sqrt(k), sqrt(2k)}.

    Agent nu uses kappa = the (nu+1)-th prime, and the ladder
    w1 = sqrt(kappa)(3 + 2 sqrt 2), w2 = sqrt(kappa), w3 = (w1 + w2)/2.
    """
    if N < 1:
        raise ValueError("need at least one agent")
    primes = first_primes(N + 1)
    out = []
    for nu in range(1, N + 1):
        kappa = primes[nu]  # primes[0] = 2 is skipped by design
        w2 = Radical.sqrt(kappa)
        w1 = Radical.sqrt(kappa, 3) + Radical.sqrt(2 * kappa, 2)
        w3 = Radical.sqrt(kappa, 2) + Radical.sqrt(2 * kappa, 1)
        out.append((w1, w2, w3))
    return out


def unicycle_frequencies(N):
    """Float frequency triples; w3 is computed as (w1+w2)/2 so that the
    resonance w1 + w2 - 2 w3 = 0 cancels exactly in floating point."""
    out = []
    for (w1, w2, _w3) in unicycle_frequencies_exact(N):
        f1, f2 = float(w1), float(w2)
        out.append((f1, f2, (f1 + f2) / 2.0))
    return out


def make_unicycle_inputs(N, j):
    """Three channels per agent: (w1 j)^{3/4} cos(w1 j t),
    (w2 j)^{3/4} sin(w2 j t), 2^{13/8} (w3 j)^{3/4} cos(w3 j t)."""
    if N < 1 or j < 1:
        raise ValueError("need N >= 1 and j >= 1")
    channels = []
    for (w1, w2, w3) in unicycle_frequencies(N):
        channels.append(Sinusoid((w1 * j) ** 0.75, w1 * j, 0.0))
        channels.append(Sinusoid((w2 * j) ** 0.75, w2 * j, -0.5 * math.pi))
        channels.append(Sinusoid(2.0 ** UNICYCLE_RATIO_EXPONENT * (w3 * j) ** 0.75,
                                 w3 * j, 0.0))
    return OrdinaryInput(channels)


def _unicycle_table_entries():
    """Within-agent fourth-order limit coefficients, exact over Q(sqrt 2).

    Keys are channel patterns relative to the agent offset; the 12 nonzero
    values are the permutations of the pattern (1, 2, 3, 3).
    """
    half = Fraction(1, 2)
    r2 = Radical.sqrt(2)
    r2h = Radical.sqrt(2, half)  # sqrt(2)/2 = 1/sqrt(2)
    one = Radical.of(1)
    return {
        (1, 2, 3, 3): Radical.of(-half) + r2h,
        (1, 3, 2, 3): Radical.of(2) - r2,
        (1, 3, 3, 2): Radical.of(-2),
        (2, 1, 3, 3): Radical.of(half) + r2h,
        (2, 3, 1, 3): Radical.of(-2) - r2,
        (2, 3, 3, 1): Radical.of(2),
        (3, 1, 2, 3): -one,
        (3, 1, 3, 2): Radical.of(2) + r2,
        (3, 2, 1, 3): one,
        (3, 2, 3, 1): Radical.of(-2) + r2,
        (3, 3, 1, 2): Radical.of(-half) - r2h,
        (3, 3, 2, 1): Radical.of(half) - r2h,
    }


def unicycle_limit_table(N):
    """Exact fourth-order limit coefficients over all agents, as Radicals.

    The within-agent values do not depend on the agent (they are homogeneous
    of degree zero in the frequency scale); agent nu occupies channels
    3(nu-1)+1 .. 3(nu-1)+3.
    """
    if N < 1:
        raise ValueError("need at least one agent")
    m = 3 * N
    table = {}
    base = _unicycle_table_entries()
    for nu in range(1, N + 1):
        off = 3 * (nu - 1)
        for pattern, val in base.items():
            table[MultiIndex(tuple(off + k for k in pattern), m)] = val
    return table


def unicycle_limit_coefficients(N):
    """Float PolynomialInput (order 4, constant coefficients) of the exact table."""
    coeffs = {I: Constant(float(val)) for I, val in unicycle_limit_table(N).items()}
    return PolynomialInput(3 * N, 4, coeffs)


def _unicycle_eta(N, j):
    """Per channel: signed frequencies and complex amplitude coefficients."""
    eta = {}
    for nu, (w1, w2, w3) in enumerate(unicycle_frequencies(N), start=1):
        off = 3 * (nu - 1)
        a1 = w1 ** 0.75 / 2.0
        a2 = w2 ** 0.75 / 2.0
        a3 = 2.0 ** UNICYCLE_RATIO_EXPONENT * w3 ** 0.75 / 2.0
        eta[off + 1] = [(+w1, complex(a1)), (-w1, complex(a1))]
        eta[off + 2] = [(+w2, -1j * a2), (-w2, +1j * a2)]
        eta[off + 3] = [(+w3, complex(a3)), (-w3, complex(a3))]
    return eta


def closed_form_unicycle_gd(N, j, r=4):
    """Canonical order-4 pair (v^j, W^j) for the unicycle family.

    Each W^j_I of order l collects the non-resonant frequency tuples
    (all backward partial sums T_k = w_k + ... + w_l nonzero):

        W^j_I = (-1)^l j^{-l/4} sum  prod(eta) / (i^l prod_k T_k) e^{i j (sum w) t},

    while resonant fourth-order tuples (total sum zero, inner tails nonzero)
    accumulate into the constant coefficients v^j_I.  First- through
    third-order v^j vanish identically: resonant pairs cancel pointwise and
    no triple of ladder frequencies sums to zero.  Tuples are classified with
    a float tolerance that is far below the smallest nonzero partial sum of
    the ladder (the exact-arithmetic route lives in
    `check_frequency_properties`).
    """
    if r != 4:
        raise ValueError("the unicycle construction is an order-4 family")
    if N < 1 or j < 1:
        raise ValueError("need N >= 1 and j >= 1")
    m = 3 * N
    jf = float(j)
    eta = _unicycle_eta(N, j)
    wmax = max(abs(w) for terms in eta.values() for (w, _) in terms)
    tol = 1e-9 * (1.0 + 4.0 * wmax)

    v_entries = {}
    w_entries = {}
    for ell in range(1, r + 1):
        jpow = jf ** (-ell / 4.0)
        sign = (-1.0) ** ell
        ipow = 1j ** ell
        for I in all_multi_indices(m, ell, min_len=ell):
            wterms = []
            vdc = 0.0 + 0.0j
            for combo in itertools.product(*(eta[i] for i in I)):
                ws = [w for (w, _) in combo]
                coef = 1.0 + 0.0j
                for (_, c) in combo:
                    coef *= c
                tails = []
                acc = 0.0
                for w in reversed(ws):
                    acc += w
                    tails.append(acc)  # tails[k-1] = w_{l-k+1} + ... + w_l
                total = tails[-1]
                inner_ok = all(abs(T) > tol for T in tails[:-1])
                if inner_ok and abs(total) > tol:
                    h = 1.0
                    for T in tails:
                        h *= T
                    wterms.append(_Harm(sign * jpow * coef / (ipow * h),
                                        jf * total, ()))
                elif inner_ok and ell == r:
                    # resonant top-order tuple: constant contribution
                    h = 1.0
                    for T in tails[:-1]:
                        h *= T
                    vdc += -coef / (1j ** (r - 1) * h)
            w_entries[I] = _harmonics_to_signal(wterms)
            if ell == r and abs(vdc) > 1e-10 * (1.0 + wmax):
                v_entries[I] = Constant(vdc.real)
    return (PolynomialInput(m, r, v_entries),
            GeneralizedDifference(m, r, w_entries, "closed-form"))


# ---------------------------------------------------------------------------
# Frequency-ladder properties (exact enumeration)
# ---------------------------------------------------------------------------

@dataclass
class FrequencyPropertyReport:
    """Outcome of the exhaustive ladder-frequency checks for N agents.

    prop_single:    no channel frequency is zero.
    prop_pairs:     zero pair sums only occur within a channel (w, -w).
    prop_triples:   no triple of channel frequencies sums to zero.
    prop_quadruples: zero quadruple sums are exactly the pairwise
                    cancelations plus, per agent, the 12 arrangements of
                    (w1, w2, -w3, -w3) and the 12 of its negation.
    """
    N: int
    prop_single: bool
    prop_pairs: bool
    prop_triples: bool
    prop_quadruples: bool
    nonpair_patterns: dict = field(default_factory=dict)
    mirror_patterns: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return (self.prop_single and self.prop_pairs and self.prop_triples
                and self.prop_quadruples)

    def summary(self):
        flags = [("single", self.prop_single), ("pairs", self.prop_pairs),
                 ("triples", self.prop_triples),
                 ("quadruples", self.prop_quadruples)]
        body = ", ".join(f"{name}={'ok' if val else 'FAIL'}"
                         for name, val in flags)
        counts = ", ".join(f"agent {nu}: {c}+{self.mirror_patterns.get(nu, 0)}"
                           for nu, c in sorted(self.nonpair_patterns.items()))
        return f"N={self.N}: {body}; non-pair patterns per agent: {counts or '-'}"


def _is_pure_pair_cancelation(quad):
    """Can the four exact frequencies be split into two (x, -x) pairs?"""
    a, b, c, d = quad
    for (p, q), (s, t) in (((a, b), (c, d)), ((a, c), (b, d)), ((a, d), (b, c))):
        if (p + q).is_zero() and (s + t).is_zero():
            return True
    return False


def _matches_multiset(quad, target):
    pool = list(target)
    for w in quad:
        for q, cand in enumerate(pool):
            if (w - cand).is_zero():
                pool.pop(q)
                break
        else:
            return False
    return True


def check_frequency_properties(N, max_agents=4, frequencies=None):
    """Exhaustively verify the resonance structure of the unicycle ladder.

    All sums are decided in exact arithmetic over the rational span of
    {sqrt(kappa), sqrt(2 kappa)}.  A float prefilter skips tuples whose
    absolute sum exceeds 1e-6: the float error of a four-term sum here is
    below 1e-12, so the prefilter can only send *more* tuples to the exact
    check, never hide a true zero.

    Parameters
    ----------
    N : agent count (enumeration is O((6N)^4); bounded by `max_agents`).
    frequencies : optional {(nu, k): Radical} overrides, used to inject
        defective ladders in tests.
    """
    if N < 1:
        raise ValueError("need at least one agent")
    if N > max_agents:
        raise ValueError(f"enumeration bound exceeded: N={N} > {max_agents}")

    ladder = {}
    for nu, (w1, w2, w3) in enumerate(unicycle_frequencies_exact(N), start=1):
        ladder[(nu, 1)], ladder[(nu, 2)], ladder[(nu, 3)] = w1, w2, w3
    if frequencies:
        ladder.update(frequencies)

    universe = []  # (channel, agent, exact frequency)
    for nu in range(1, N + 1):
        for k in range(1, 4):
            ch = 3 * (nu - 1) + k
            w = ladder[(nu, k)]
            universe.append((ch, nu, w))
            universe.append((ch, nu, -w))

    report = FrequencyPropertyReport(N, True, True, True, True)
    report.nonpair_patterns = {nu: 0 for nu in range(1, N + 1)}
    report.mirror_patterns = {nu: 0 for nu in range(1, N + 1)}

    def complain(msg):
        if len(report.violations) < 32:
            report.violations.append(msg)

    for (ch, nu, w) in universe:
        if w.is_zero():
            report.prop_single = False
            complain(f"channel {ch}: zero frequency")

    n = len(universe)
    for (ch1, _, w1) in universe:
        for (ch2, _, w2) in universe:
            if (w1 + w2).is_zero() and ch1 != ch2:
                report.prop_pairs = False
                complain(f"zero pair sum across channels {ch1}, {ch2}")

    floats = np.array([float(w) for (_, _, w) in universe])
    pair_sums = floats[:, None] + floats[None, :]

    # triples: prefilter |w_a + (w_b + w_c)| then confirm exactly
    tri = np.abs(floats[:, None, None] + pair_sums[None, :, :]) < 1e-6
    for a, b, c in zip(*np.nonzero(tri)):
        if (universe[a][2] + universe[b][2] + universe[c][2]).is_zero():
            report.prop_triples = False
            complain(f"zero triple sum at channels "
                     f"{universe[a][0]}, {universe[b][0]}, {universe[c][0]}")

    patterns = {}
    for nu in range(1, N + 1):
        w1, w2, w3 = (ladder[(nu, 1)], ladder[(nu, 2)], ladder[(nu, 3)])
        patterns[nu] = ((w1, w2, -w3, -w3), (-w1, -w2, w3, w3))

    quad = np.abs(pair_sums[:, :, None, None] + pair_sums[None, None, :, :]) < 1e-6
    for a, b, c, d in zip(*np.nonzero(quad)):
        ws = (universe[a][2], universe[b][2], universe[c][2], universe[d][2])
        if not (ws[0] + ws[1] + ws[2] + ws[3]).is_zero():
            continue
        if _is_pure_pair_cancelation(ws):
            continue
        agents = {universe[q][1] for q in (a, b, c, d)}
        matched = False
        if len(agents) == 1:
            nu = agents.pop()
            pos, neg = patterns[nu]
            if _matches_multiset(ws, pos):
                report.nonpair_patterns[nu] += 1
                matched = True
            elif _matches_multiset(ws, neg):
                report.mirror_patterns[nu] += 1
                matched = True
        if not matched:
            report.prop_quadruples = False
            complain("unclassified zero quadruple sum at channels "
                     f"{tuple(universe[q][0] for q in (a, b, c, d))}")

    for nu in range(1, N + 1):
        if report.nonpair_patterns[nu] != 12 or report.mirror_patterns[nu] != 12:
            report.prop_quadruples = False
            complain(f"agent {nu}: expected 12+12 non-pair patterns, got "
                     f"{report.nonpair_patterns[nu]}+{report.mirror_patterns[nu]}")
    return report


# ---------------------------------------------------------------------------
# Numerical route: the difference recursion as one triangular ODE system
# ---------------------------------------------------------------------------

_STAGE_NUDGE = 1e-9  # relative inward nudge of the first/last stage times


def integrate_generalized_difference(u, v, t0=0.0, p0=None, grid=None):
    """Integrate the difference recursion dW_i = v_i - u_i, dW_iI = v_iI - u_i W_I.

    The full triangular system over all 0<|I|<=r is advanced jointly with a
    classical fourth-order Runge-Kutta sweep over `grid` (which must be
    strictly increasing and contain t0; integration runs forward and backward
    from t0).  Endpoint stage times are nudged into the step interior by a
    relative 1e-9 so that one-sided branches of discontinuous channels (the
    sawtooth family) are picked correctly when jumps are grid-aligned.

    Parameters
    ----------
    u, v : OrdinaryInput and PolynomialInput with matching channel count.
    p0 : initial coefficients at t0: a {MultiIndex: float} map, a
        GeneralizedDifference (seeded from its values at t0, the natural way
        to line an integrated variant up with a closed form), or None (zeros).
    grid : 1-d array of output times.

    Returns
    -------
    GeneralizedDifference with provenance "integrated", one GridFunction per
    multi-index.
    """
    if u.m != v.m:
        raise ValueError(f"channel mismatch: u.m={u.m}, v.m={v.m}")
    if grid is None or len(grid) == 0:
        raise ValueError("need a nonempty time grid")
    ts = np.asarray(grid, dtype=float)
    if ts.ndim != 1 or np.any(np.diff(ts) <= 0.0):
        raise ValueError("grid must be strictly increasing")
    k0 = int(np.argmin(np.abs(ts - t0)))
    if abs(ts[k0] - t0) > 1e-9 * max(1.0, abs(t0)):
        raise ValueError("grid must contain the initial time t0")

    m, r = u.m, v.r
    idxs = all_multi_indices(m, r)
    pos = {I: q for q, I in enumerate(idxs)}
    nstate = len(idxs)
    # suffix pointers; first-order entries point at a virtual slot holding 1
    sfx = np.array([pos[I.suffix()] if len(I) > 1 else nstate for I in idxs])
    chan = np.array([I[0] - 1 for I in idxs])
    vsigs = [v.coefficient(I) for I in idxs]

    w0 = np.zeros(nstate)
    if isinstance(p0, GeneralizedDifference):
        p0 = p0.values_at(t0)
    if p0:
        for key, val in p0.items():
            I = key if isinstance(key, MultiIndex) else MultiIndex(key, m)
            w0[pos[I]] = float(val)

    def sweep(times):
        """March the joint system over consecutive `times`, returning states."""
        n = len(times) - 1
        out = np.empty((len(times), nstate))
        out[0] = w0
        if n == 0:
            return out
        h = np.diff(times)
        t_lo = times[:-1] + _STAGE_NUDGE * h
        t_mid = times[:-1] + 0.5 * h
        t_hi = times[:-1] + (1.0 - _STAGE_NUDGE) * h
        stage_ts = np.concatenate([t_lo, t_mid, t_hi])
        uvals = u.evaluate(stage_ts).reshape(m, 3, n)
        vvals = np.stack([np.asarray(sig._eval(stage_ts), dtype=float)
                          for sig in vsigs]).reshape(nstate, 3, n)
        w = w0.copy()
        aug = np.empty(nstate + 1)
        aug[nstate] = 1.0

        def rhs(stage, step, state):
            aug[:nstate] = state
            return vvals[:, stage, step] - uvals[chan, stage, step] * aug[sfx]

        for s in range(n):
            hs = h[s]
            k1 = rhs(0, s, w)
            k2 = rhs(1, s, w + 0.5 * hs * k1)
            k3 = rhs(1, s, w + 0.5 * hs * k2)
            k4 = rhs(2, s, w + hs * k3)
            w = w + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[s + 1] = w
        return out

    fwd = sweep(ts[k0:])
    bwd = sweep(ts[k0::-1])
    states = np.vstack([bwd[::-1][:-1], fwd]) if k0 > 0 else fwd

    entries = {I: GridFunction(ts, states[:, pos[I]]) for I in idxs}
    return GeneralizedDifference(m, r, entries, "integrated")


# ---------------------------------------------------------------------------
# Convergence reports and sweeps
# ---------------------------------------------------------------------------

@dataclass
class GdReport:
    """Sampled sup-norms of the three convergence condition families.

    v_gap[I]  = sup |v^j_I - v_I|          (condition c1),
    w_sup[I]  = sup |W^j_I|                (condition c2),
    uw_sup[(i, I)] = sup |u^j_i W^j_I| over |I| = r (condition c3),
    all over the window [t_start, t_start + t_window].
    """
    j: int
    m: int
    r: int
    window: tuple
    v_gap: dict
    w_sup: dict
    uw_sup: dict

    @property
    def c1_max(self):
        return max(self.v_gap.values(), default=0.0)

    @property
    def c2_max(self):
        return max(self.w_sup.values(), default=0.0)

    @property
    def c3_max(self):
        return max(self.uw_sup.values(), default=0.0)

    def w_sup_by_order(self, ell):
        vals = [s for I, s in self.w_sup.items() if len(I) == ell]
        return max(vals, default=0.0)

    def rows(self):
        """Flat (metric, index, value) rows for CSV emission."""
        out = []
        for I in sorted(self.v_gap):
            out.append(("v_gap", str(tuple(I)), self.v_gap[I]))
        for I in sorted(self.w_sup):
            out.append(("w_sup", str(tuple(I)), self.w_sup[I]))
        for (i, I) in sorted(self.uw_sup):
            out.append(("uw_sup", f"{i}:{tuple(I)}", self.uw_sup[(i, I)]))
        return out


MIN_SAMPLES_PER_PERIOD = 64


def _report_grid(u, W, t_start, t_window, min_samples=1024, max_samples=2 ** 21):
    periods = [p for p in u.periods() if p and p > 0.0]
    for entry in W.entries.values():
        p = entry.period() if isinstance(entry, Signal) else None
        if p and p > 0.0:
            periods.append(p)
    if periods:
        n = int(math.ceil(MIN_SAMPLES_PER_PERIOD * t_window / min(periods)))
    else:
        n = min_samples
    n = int(np.clip(n, min_samples, max_samples))
    return np.linspace(t_start, t_start + t_window, n)


def gd_convergence_report(u, v_limit, v_j, W, t_window, j=0, t_start=0.0):
    """Sampled convergence metrics for one member of an input sequence.

    Sup-norms are estimated on a dense grid with at least 64 samples per
    shortest carrier period (closed-form entries) or on the stored grid
    (integrated entries).  Descriptor-level bounds remain available through
    the Signal API; the report intentionally records the sampled values so a
    j-sweep measures actual decay rather than construction constants.
    """
    if t_window <= 0.0:
        raise ValueError("window must be positive")
    if u.m != v_limit.m or u.m != v_j.m or u.m != W.m:
        raise ValueError("channel counts of u, v, v^j, W must agree")
    tgrid = _report_grid(u, W, t_start, t_window)
    uvals = u.evaluate(tgrid)

    v_gap = {}
    for I in sorted(set(v_limit.indices()) | set(v_j.indices())):
        gap = v_j.coefficient(I)(tgrid) - v_limit.coefficient(I)(tgrid)
        v_gap[I] = float(np.max(np.abs(gap)))

    w_sup = {}
    w_vals_top = {}
    for I in W.indices():
        vals = np.asarray(W.entry(I)(tgrid))
        w_sup[I] = float(np.max(np.abs(vals)))
        if len(I) == W.r:
            w_vals_top[I] = vals

    uw_sup = {}
    for I, vals in w_vals_top.items():
        for i in range(1, u.m + 1):
            uw_sup[(i, I)] = float(np.max(np.abs(uvals[i - 1] * vals)))

    return GdReport(j=j, m=u.m, r=W.r, window=(t_start, t_start + t_window),
                    v_gap=v_gap, w_sup=w_sup, uw_sup=uw_sup)


@dataclass
class GdSweepResult:
    """Reports over a j-sweep plus fitted log-log decay slopes."""
    js: list
    reports: list
    w_slopes: dict       # order -> fitted slope of max w_sup vs j
    c3_slope: float      # fitted slope of c3_max vs j (None if degenerate)
    c1_decreasing: bool
    c2_decreasing: bool
    c3_decreasing: bool

    def summary(self):
        slopes = ", ".join(f"|I|={ell}: {s:+.3f}"
                           for ell, s in sorted(self.w_slopes.items()))
        return (f"js={self.js}; W-sup slopes {slopes}; "
                f"c3 slope {self.c3_slope if self.c3_slope is not None else 'n/a'}; "
                f"decreasing: c1={self.c1_decreasing} c2={self.c2_decreasing} "
                f"c3={self.c3_decreasing}")


def _fit_slope(js, ys):
    ys = np.asarray(ys, dtype=float)
    if np.any(ys <= 0.0):
        return None
    return float(np.polyfit(np.log(np.asarray(js, float)), np.log(ys), 1)[0])


def _non_increasing(ys):
    return all(b <= a * (1.0 + 1e-9) + 1e-300 for a, b in zip(ys, ys[1:]))


def gd_sweep(builder, js):
    """Run gd_convergence_report across a j-sweep and fit decay slopes.

    `builder(j)` must return (u, v_limit, v_j, W, t_window); use the
    *_gd_family helpers for the built-in input families.  Windows shrink
    like 1/j there, which keeps the sampled sups proportional to the decay
    prefactors and the fitted slopes clean.
    """
    js = sorted(int(j) for j in js)
    reports = [gd_convergence_report(*builder(j), j=j) for j in js]
    orders = sorted({len(I) for rep in reports for I in rep.w_sup})
    w_slopes = {}
    for ell in orders:
        slope = _fit_slope(js, [rep.w_sup_by_order(ell) for rep in reports])
        if slope is not None:
            w_slopes[ell] = slope
    c3_slope = _fit_slope(js, [rep.c3_max for rep in reports])
    return GdSweepResult(
        js=js, reports=reports, w_slopes=w_slopes, c3_slope=c3_slope,
        c1_decreasing=_non_increasing([rep.c1_max for rep in reports]),
        c2_decreasing=_non_increasing([rep.c2_max for rep in reports]),
        c3_decreasing=_non_increasing([rep.c3_max for rep in reports]),
    )


def sinusoid_gd_family(omegas, lambdas, window_periods=4.0):
    """builder(j) for gd_sweep over the sinusoid dither family."""
    omegas = _validate_omegas(omegas)
    v_limit = sinusoid_limit_coefficients(omegas, lambdas)

    def builder(j):
        u = make_sinusoid_inputs(omegas, lambdas, j)
        v_j, W = closed_form_sinusoid_gd(omegas, lambdas, j)
        t_window = window_periods * TWO_PI / (j * min(omegas))
        return (u, v_limit, v_j, W, t_window)

    return builder


def sawtooth_gd_family(window_periods=4.0):
    """builder(j) for gd_sweep over the sawtooth family."""
    v_limit = sawtooth_limit_coefficients()

    def builder(j):
        u = make_sawtooth_inputs(j)
        v_j, W = closed_form_sawtooth_gd(j)
        return (u, v_limit, v_j, W, window_periods / j)

    return builder


def unicycle_gd_family(N, window_periods=4.0):
    """builder(j) for gd_sweep over the unicycle family."""
    v_limit = unicycle_limit_coefficients(N)
    wmin = min(min(ws) for ws in unicycle_frequencies(N))

    def builder(j):
        u = make_unicycle_inputs(N, j)
        v_j, W = closed_form_unicycle_gd(N, j)
        return (u, v_limit, v_j, W, window_periods * TWO_PI / (j * wmin))

    return builder
