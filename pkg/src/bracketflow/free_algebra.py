"""Exact kernel: multi-indices, noncommutative polynomials, iterated Lie brackets.

Everything here is exact arithmetic.  Coefficients are duck-typed: int,
float, fractions.Fraction and Radical (elements of Q(sqrt(d1), ..., sqrt(dk)))
all work; identity checks are exact whenever the inputs are exact.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


# ---------------------------------------------------------------------------
# exact radical arithmetic
# ---------------------------------------------------------------------------

def _square_free_split(n):
    """Return (s, d) with n = s^2 * d and d square free (n positive int)."""
    s, d = 1, 1
    k = 2
    while k * k <= n:
        count = 0
        while n % k == 0:
            n //= k
            count += 1
        if count:
            s *= k ** (count // 2)
            if count % 2:
                d *= k
        k += 1
    return s, d * n  # leftover n is prime (or 1), exponent 1


class Radical:
    """An exact number of the form sum_d q_d * sqrt(d), q_d rational, d square free.

    Supports +, -, *, division by rationals, and exact zero/equality tests.
    The zero test relies on the linear independence over Q of square roots of
    pairwise distinct square-free integers, which is what makes it sound to
    decide "is this frequency sum zero?" symbolically.  General inversion is
    deliberately not implemented (nothing in this package needs it).
    """

    __slots__ = ("_coeffs",)

    def __init__(self, coeffs=None):
        # coeffs: dict square-free radicand -> Fraction, zeros dropped
        self._coeffs = {}
        if coeffs:
            for d, q in coeffs.items():
                q = Fraction(q)
                if q:
                    self._coeffs[d] = q

    @classmethod
    def of(cls, q):
        """Rational constant as a Radical."""
        return cls({1: Fraction(q)})

    @classmethod
    def sqrt(cls, n, scale=1):
        """scale * sqrt(n) for a positive integer n, with square extraction."""
        if n <= 0:
            raise ValueError("radicand must be a positive integer")
        s, d = _square_free_split(n)
        return cls({d: Fraction(scale) * s})

    def _as_radical(self, other):
        if isinstance(other, Radical):
            return other
        if isinstance(other, (int, Fraction)):
            return Radical.of(other)
        return NotImplemented

    def __add__(self, other):
        other = self._as_radical(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self._coeffs)
        for d, q in other._coeffs.items():
            out[d] = out.get(d, Fraction(0)) + q
        return Radical(out)

    __radd__ = __add__

    def __neg__(self):
        return Radical({d: -q for d, q in self._coeffs.items()})

    def __sub__(self, other):
        other = self._as_radical(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._as_radical(other)
        if other is NotImplemented:
            return NotImplemented
        out = {}
        for d1, q1 in self._coeffs.items():
            for d2, q2 in other._coeffs.items():
                # sqrt(d1)*sqrt(d2) = s*sqrt(d) with d1*d2 = s^2*d
                s, d = _square_free_split(d1 * d2)
                out[d] = out.get(d, Fraction(0)) + q1 * q2 * s
        return Radical(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, Fraction)):
            if other == 0:
                raise ZeroDivisionError
            return Radical({d: q / other for d, q in self._coeffs.items()})
        return NotImplemented

    def is_zero(self):
        return not self._coeffs

    def __bool__(self):
        return bool(self._coeffs)

    def __eq__(self, other):
        other = self._as_radical(other)
        if other is NotImplemented:
            return NotImplemented
        return (self - other).is_zero()

    def __hash__(self):
        return hash(frozenset(self._coeffs.items()))

    def __float__(self):
        return float(sum(q * math.sqrt(d) for d, q in self._coeffs.items()))

    def __abs__(self):
        return abs(float(self))

    def __repr__(self):
        if not self._coeffs:
            return "0"
        parts = []
        for d in sorted(self._coeffs):
            q = self._coeffs[d]
            parts.append(str(q) if d == 1 else f"{q}*sqrt({d})")
        return " + ".join(parts)


def first_primes(k):
    """The first k primes, by trial division (k is tiny here)."""
    primes = []
    n = 2
    while len(primes) < k:
        if all(n % p for p in primes if p * p <= n):
            primes.append(n)
        n += 1
    return primes


# ---------------------------------------------------------------------------
# multi-indices
# ---------------------------------------------------------------------------

class MultiIndex:
    """An ordered multi-index I = (i_1, ..., i_l) over the alphabet {1..m}.

    The empty multi-index is the unit monomial.  Immutable and hashable.
    """

    __slots__ = ("indices", "m")

    def __init__(self, indices, m):
        indices = tuple(int(i) for i in indices)
        m = int(m)
        if m < 1:
            raise ValueError("alphabet size m must be >= 1")
        for i in indices:
            if not 1 <= i <= m:
                raise ValueError(f"index {i} outside alphabet 1..{m}")
        self.indices = indices
        self.m = m

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, k):
        return self.indices[k]

    def __eq__(self, other):
        return (isinstance(other, MultiIndex)
                and self.indices == other.indices and self.m == other.m)

    def __hash__(self):
        return hash((self.indices, self.m))

    def __lt__(self, other):
        # graded lexicographic, handy for stable output ordering
        return (len(self.indices), self.indices) < (len(other.indices), other.indices)

    def __repr__(self):
        return f"I{self.indices}"

    def suffix(self):
        """Drop the leading index: (i_1, i_2, ..., i_l) -> (i_2, ..., i_l)."""
        return MultiIndex(self.indices[1:], self.m)


def concat(a, b):
    """Concatenation IJ of two multi-indices over the same alphabet."""
    if a.m != b.m:
        raise ValueError(f"alphabet size mismatch: {a.m} != {b.m}")
    return MultiIndex(a.indices + b.indices, a.m)


# ---------------------------------------------------------------------------
# noncommutative polynomials
# ---------------------------------------------------------------------------

def _clean(terms):
    return {I: c for I, c in terms.items() if not _is_zero_coeff(c)}


def _is_zero_coeff(c):
    if isinstance(c, Radical):
        return c.is_zero()
    return c == 0


class NcPolynomial:
    """A noncommutative polynomial sum_I p_I X_I over the alphabet {1..m}.

    Stored sparse and canonical (no zero coefficients).  Addition,
    subtraction, scalar and polynomial multiplication are supported through
    operators; the product is the bilinear extension of concatenation.
    """

    __slots__ = ("m", "terms")

    def __init__(self, m, terms=None):
        self.m = int(m)
        self.terms = _clean(dict(terms or {}))
        for I in self.terms:
            if I.m != self.m:
                raise ValueError("term alphabet size mismatch")

    @classmethod
    def zero(cls, m):
        return cls(m, {})

    @classmethod
    def monomial(cls, I, coeff=1):
        return cls(I.m, {I: coeff})

    @classmethod
    def generator(cls, k, m):
        """X_k as a polynomial."""
        return cls.monomial(MultiIndex((k,), m))

    def __eq__(self, other):
        if not isinstance(other, NcPolynomial):
            return NotImplemented
        if self.m != other.m:
            return False
        keys = set(self.terms) | set(other.terms)
        return all(_coeff_eq(self.terms.get(I, 0), other.terms.get(I, 0)) for I in keys)

    def is_zero(self):
        return not self.terms

    def __add__(self, other):
        self._check(other)
        out = dict(self.terms)
        for I, c in other.terms.items():
            out[I] = out.get(I, 0) + c
        return NcPolynomial(self.m, out)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return NcPolynomial(self.m, {I: -c for I, c in self.terms.items()})

    def scale(self, a):
        return NcPolynomial(self.m, {I: a * c for I, c in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, NcPolynomial):
            return poly_mul(self, other)
        return self.scale(other)

    def __rmul__(self, a):
        return self.scale(a)

    def degree(self):
        """Max term length, or -1 for the zero polynomial."""
        return max((len(I) for I in self.terms), default=-1)

    def max_abs_coeff(self):
        """Largest |coefficient| as a float (0.0 for the zero polynomial)."""
        return max((abs(float(c)) for c in self.terms.values()), default=0.0)

    def _check(self, other):
        if self.m != other.m:
            raise ValueError(f"alphabet size mismatch: {self.m} != {other.m}")

    def __repr__(self):
        if not self.terms:
            return "0"
        parts = [f"{c}*X{I.indices}" for I, c in sorted(self.terms.items(),
                                                        key=lambda t: t[0])]
        return " + ".join(parts)


def _coeff_eq(a, b):
    if isinstance(a, Radical) or isinstance(b, Radical):
        if not isinstance(a, Radical):
            a = Radical.of(a) if isinstance(a, (int, Fraction)) else a
        if not isinstance(b, Radical):
            b = Radical.of(b) if isinstance(b, (int, Fraction)) else b
        if isinstance(a, Radical) and isinstance(b, Radical):
            return a == b
        return float(a) == float(b)
    return a == b


def poly_mul(p, q):
    """Concatenation product of two noncommutative polynomials."""
    p._check(q)
    out = {}
    for I, a in p.terms.items():
        for J, b in q.terms.items():
            K = concat(I, J)
            out[K] = out.get(K, 0) + a * b
    return NcPolynomial(p.m, out)


def lie_bracket(p, q):
    """[p, q] = pq - qp."""
    return poly_mul(p, q) - poly_mul(q, p)


def bracket_polynomial(I):
    """The right-nested bracket [X_I] = [X_{i_1},[X_{i_2},...,X_{i_l}]...].

    Homogeneous of degree |I|; for |I| = 1 this is just the generator.
    """
    if len(I) == 0:
        raise ValueError("bracket of the empty multi-index is undefined")
    acc = NcPolynomial.generator(I.indices[-1], I.m)
    for k in I.indices[-2::-1]:
        acc = lie_bracket(NcPolynomial.generator(k, I.m), acc)
    return acc


# ---------------------------------------------------------------------------
# the order-r algebraic identity
# ---------------------------------------------------------------------------

class IdentityCheck:
    """Result of check_algebraic_identity: boolean verdict plus residual."""

    def __init__(self, holds, residual, difference):
        self.holds = holds
        self.residual = residual
        self.difference = difference  # NcPolynomial, for diagnostics

    def __bool__(self):
        return self.holds

    def __repr__(self):
        return f"IdentityCheck(holds={self.holds}, residual={self.residual})"


def check_algebraic_identity(v, r, m=None):
    """Check sum_I v_I X_I == sum_I (v_I/|I|) [X_I] coefficientwise.

    Parameters
    ----------
    v : mapping MultiIndex -> coefficient, supported on 0 < |I| <= r.
        The coefficients may be exact (int/Fraction/Radical) or floats.
    r : order bound.
    m : alphabet size; inferred from the keys when omitted.

    Returns an IdentityCheck whose residual is the max absolute coefficient
    of the difference (exactly 0.0 when the identity holds with exact input).
    A polynomial input passes iff it is Lie-element valued.
    """
    items = [(I, c) for I, c in v.items() if not _is_zero_coeff(c)]
    if m is None:
        if not items:
            return IdentityCheck(True, 0.0, None)
        m = items[0][0].m
    for I, _ in items:
        if not 0 < len(I) <= r:
            raise ValueError(f"support violates 0 < |I| <= {r}: {I}")
    lhs = NcPolynomial(m, dict(items))
    rhs = NcPolynomial.zero(m)
    for I, c in items:
        rhs = rhs + bracket_polynomial(I).scale(_divide(c, len(I)))
    diff = lhs - rhs
    return IdentityCheck(diff.is_zero(), diff.max_abs_coeff(), diff)


def _divide(c, k):
    if isinstance(c, int):
        return Fraction(c, k)
    return c / k


def random_sparse_polynomial(rng, m, max_len=3, n_terms=3, coeff_range=6):
    """Random sparse NcPolynomial with small Fraction coefficients (test helper)."""
    terms = {}
    for _ in range(n_terms):
        length = rng.randrange(0, max_len + 1)
        I = MultiIndex([rng.randrange(1, m + 1) for _ in range(length)], m)
        c = Fraction(rng.randrange(-coeff_range, coeff_range + 1),
                     rng.randrange(1, 4))
        terms[I] = terms.get(I, 0) + c
    return NcPolynomial(m, terms)


def all_multi_indices(m, r, min_len=1):
    """All multi-indices over {1..m} with min_len <= |I| <= r (graded order)."""
    out = []
    for length in range(min_len, r + 1):
        for tup in itertools.product(range(1, m + 1), repeat=length):
            out.append(MultiIndex(tup, m))
    return out
