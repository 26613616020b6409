"""Sparse truncated polynomial algebra with Poisson brackets.

Polynomials are stored as a dict mapping exponent tuples to float
coefficients, with every term above a fixed total degree dropped.  This
is the algebra in which Taylor expansions of Hamiltonians, constraint
functions, generating functions and normal forms live.

Coordinates follow the canonical pairing convention (q_1..q_m,
p_1..p_m), so for ``n_vars = 2m`` the variable with index ``i < m`` is a
position and index ``m + i`` is its conjugate momentum.
"""

from __future__ import annotations

import numbers
from typing import Iterable, Mapping

import numpy as np

#: coefficients with absolute value <= COEFF_TOL are pruned after every op
COEFF_TOL = 1e-12

#: default truncation order; order-4 normal forms need degree-6 intermediates
DEFAULT_MAX_DEGREE = 6


def _graded_key(exp):
    return (sum(exp), exp)


class TruncatedPoly:
    """Sparse real polynomial in ``n_vars`` variables, truncated at
    total degree ``max_degree``.

    Instances are treated as immutable: all arithmetic returns new
    objects and never mutates operands.

    Parameters
    ----------
    n_vars : int
        Number of variables (positive).
    max_degree : int
        Truncation order K; terms of total degree > K are discarded.
    terms : mapping, optional
        Exponent tuple -> coefficient.  Cleaned on construction: terms
        beyond the truncation degree are dropped, coefficients below
        ``COEFF_TOL`` are pruned.
    """

    __slots__ = ("n_vars", "max_degree", "terms")

    def __init__(self, n_vars: int, max_degree: int,
                 terms: Mapping[tuple, float] | None = None):
        if n_vars < 1:
            raise ValueError("n_vars must be positive")
        if max_degree < 1:
            raise ValueError("max_degree must be positive")
        object.__setattr__(self, "n_vars", int(n_vars))
        object.__setattr__(self, "max_degree", int(max_degree))
        clean = {}
        if terms:
            for exp, coef in terms.items():
                exp = tuple(int(e) for e in exp)
                if len(exp) != n_vars:
                    raise ValueError("exponent tuple of wrong length: %r" % (exp,))
                if any(e < 0 for e in exp):
                    raise ValueError("negative exponent: %r" % (exp,))
                if sum(exp) > max_degree:
                    continue
                c = float(coef)
                if abs(c) > COEFF_TOL:
                    clean[exp] = c
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, name, value):
        raise AttributeError("TruncatedPoly is immutable")

    # ------------------------------------------------------------------
    # constructors
    # ------------------------------------------------------------------

    @classmethod
    def zero(cls, n_vars: int, max_degree: int) -> "TruncatedPoly":
        return cls(n_vars, max_degree, {})

    @classmethod
    def constant(cls, value: float, n_vars: int, max_degree: int) -> "TruncatedPoly":
        return cls(n_vars, max_degree, {(0,) * n_vars: value})

    @classmethod
    def variable(cls, i: int, n_vars: int, max_degree: int) -> "TruncatedPoly":
        """The coordinate function x_i."""
        if not 0 <= i < n_vars:
            raise ValueError("variable index out of range")
        exp = tuple(1 if j == i else 0 for j in range(n_vars))
        return cls(n_vars, max_degree, {exp: 1.0})

    @classmethod
    def monomial(cls, exp: Iterable[int], coef: float, max_degree: int) -> "TruncatedPoly":
        exp = tuple(exp)
        return cls(len(exp), max_degree, {exp: coef})

    @classmethod
    def from_linear(cls, v, max_degree: int) -> "TruncatedPoly":
        """Linear form v . x."""
        v = np.asarray(v, dtype=float)
        n = v.size
        terms = {}
        for i in range(n):
            if v[i] != 0.0:
                exp = tuple(1 if j == i else 0 for j in range(n))
                terms[exp] = v[i]
        return cls(n, max_degree, terms)

    @classmethod
    def from_quadratic_form(cls, S, max_degree: int) -> "TruncatedPoly":
        """The quadratic polynomial (1/2) x^T S x for symmetric S."""
        S = np.asarray(S, dtype=float)
        n = S.shape[0]
        if S.shape != (n, n):
            raise ValueError("S must be square")
        terms: dict = {}
        for i in range(n):
            for j in range(i, n):
                c = 0.5 * S[i, j] if i == j else 0.5 * (S[i, j] + S[j, i])
                if c == 0.0:
                    continue
                exp = [0] * n
                exp[i] += 1
                exp[j] += 1
                terms[tuple(exp)] = terms.get(tuple(exp), 0.0) + c
        return cls(n, max_degree, terms)

    # ------------------------------------------------------------------
    # structure queries
    # ------------------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        """Largest total degree present, or -1 for the zero polynomial."""
        if not self.terms:
            return -1
        return max(sum(e) for e in self.terms)

    def min_degree(self) -> int:
        """Smallest total degree present, or -1 for the zero polynomial."""
        if not self.terms:
            return -1
        return min(sum(e) for e in self.terms)

    def max_abs_coeff(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(c) for c in self.terms.values())

    def homogeneous_part(self, k: int) -> "TruncatedPoly":
        terms = {e: c for e, c in self.terms.items() if sum(e) == k}
        return TruncatedPoly(self.n_vars, self.max_degree, terms)

    def truncated(self, new_max_degree: int) -> "TruncatedPoly":
        """Copy with a (usually lower) truncation order."""
        return TruncatedPoly(self.n_vars, new_max_degree, self.terms)

    def graded_items(self):
        """Terms sorted in graded lexicographic order (deterministic)."""
        return sorted(self.terms.items(), key=lambda kv: _graded_key(kv[0]))

    def coefficient(self, exp) -> float:
        return self.terms.get(tuple(exp), 0.0)

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def _check_compat(self, other: "TruncatedPoly"):
        if self.n_vars != other.n_vars:
            raise ValueError("variable-count mismatch: %d vs %d"
                             % (self.n_vars, other.n_vars))

    def __add__(self, other):
        if isinstance(other, numbers.Real):
            other = TruncatedPoly.constant(float(other), self.n_vars, self.max_degree)
        self._check_compat(other)
        cap = min(self.max_degree, other.max_degree)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return TruncatedPoly(self.n_vars, cap, out)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return TruncatedPoly(self.n_vars, self.max_degree,
                             {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, numbers.Real):
            other = TruncatedPoly.constant(float(other), self.n_vars, self.max_degree)
        return self.__add__(-other)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            s = float(other)
            return TruncatedPoly(self.n_vars, self.max_degree,
                                 {e: s * c for e, c in self.terms.items()})
        self._check_compat(other)
        cap = min(self.max_degree, other.max_degree)
        items_b = [(e, sum(e), c) for e, c in other.terms.items()]
        out: dict = {}
        for ea, ca in self.terms.items():
            da = sum(ea)
            for eb, db, cb in items_b:
                if da + db > cap:
                    continue
                key = tuple(x + y for x, y in zip(ea, eb))
                out[key] = out.get(key, 0.0) + ca * cb
        return TruncatedPoly(self.n_vars, cap, out)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __pow__(self, k: int):
        if not isinstance(k, numbers.Integral) or k < 0:
            raise ValueError("only non-negative integer powers")
        out = TruncatedPoly.constant(1.0, self.n_vars, self.max_degree)
        base = self
        k = int(k)
        while k:
            if k & 1:
                out = out * base
            k >>= 1
            if k:
                base = base * base
        return out

    def derivative(self, i: int) -> "TruncatedPoly":
        """Partial derivative with respect to variable i."""
        if not 0 <= i < self.n_vars:
            raise ValueError("variable index out of range")
        out = {}
        for e, c in self.terms.items():
            if e[i] == 0:
                continue
            d = list(e)
            d[i] -= 1
            out[tuple(d)] = c * e[i]
        return TruncatedPoly(self.n_vars, self.max_degree, out)

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def eval(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError("point has wrong length")
        total = 0.0
        for exp, c in self.terms.items():
            m = c
            for xi, e in zip(x, exp):
                if e == 1:
                    m *= xi
                elif e:
                    m *= xi ** e
            total += m
        return total

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError("point has wrong length")
        g = np.zeros(self.n_vars)
        for exp, c in self.terms.items():
            # value of each variable power, reused across the n partials
            for i, ei in enumerate(exp):
                if ei == 0:
                    continue
                m = c * ei
                for j, (xj, ej) in enumerate(zip(x, exp)):
                    k = ej - 1 if j == i else ej
                    if k == 1:
                        m *= xj
                    elif k:
                        m *= xj ** k
                g[i] += m
        return g

    # ------------------------------------------------------------------
    # substitution
    # ------------------------------------------------------------------

    def compose(self, args: list["TruncatedPoly"]) -> "TruncatedPoly":
        """Substitute args[i] for variable i.

        All substituted polynomials must share a common variable count
        and truncation order; the result lives in that algebra.  Powers
        of the arguments are cached, so repeated composition against the
        same low-degree map stays cheap.
        """
        if len(args) != self.n_vars:
            raise ValueError("need one substitution per variable")
        n_out = args[0].n_vars
        cap = min(a.max_degree for a in args)
        for a in args:
            if a.n_vars != n_out:
                raise ValueError("substitutions disagree on variable count")
        cap = min(cap, self.max_degree)
        one = TruncatedPoly.constant(1.0, n_out, cap)
        pow_cache: list[list[TruncatedPoly]] = [[one] for _ in args]
        def arg_pow(i, k):
            cache = pow_cache[i]
            while len(cache) <= k:
                cache.append(cache[-1] * args[i])
            return cache[k]
        out = TruncatedPoly.zero(n_out, cap)
        for exp, c in self.terms.items():
            term = TruncatedPoly.constant(c, n_out, cap)
            for i, e in enumerate(exp):
                if e:
                    term = term * arg_pow(i, e)
                if term.is_zero():
                    break
            out = out + term
        return out

    def shifted(self, x0) -> "TruncatedPoly":
        """The polynomial u -> p(x0 + u) (recentering at x0)."""
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (self.n_vars,):
            raise ValueError("shift point has wrong length")
        args = []
        for i in range(self.n_vars):
            v = TruncatedPoly.variable(i, self.n_vars, self.max_degree)
            args.append(v + float(x0[i]))
        return self.compose(args)

    # ------------------------------------------------------------------
    # serialization / misc
    # ------------------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "n_vars": self.n_vars,
            "max_degree": self.max_degree,
            "terms": [{"exp": list(e), "coef": c} for e, c in self.graded_items()],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TruncatedPoly":
        terms = {tuple(t["exp"]): t["coef"] for t in d["terms"]}
        return cls(d["n_vars"], d["max_degree"], terms)

    def __repr__(self):
        if not self.terms:
            return "TruncatedPoly(0; n=%d, K=%d)" % (self.n_vars, self.max_degree)
        bits = []
        for e, c in self.graded_items()[:6]:
            mono = "*".join("x%d^%d" % (i, k) if k > 1 else "x%d" % i
                            for i, k in enumerate(e) if k)
            bits.append("%+.3g%s" % (c, "*" + mono if mono else ""))
        tail = " +..." if len(self.terms) > 6 else ""
        return "TruncatedPoly(%s%s; n=%d, K=%d)" % (
            " ".join(bits), tail, self.n_vars, self.max_degree)


# ----------------------------------------------------------------------
# Poisson structures
# ----------------------------------------------------------------------


class PoissonStructure:
    """Base class for bracket backends on polynomial algebras."""

    def bracket(self, f: TruncatedPoly, g: TruncatedPoly) -> TruncatedPoly:
        raise NotImplementedError


class CanonicalStructure(PoissonStructure):
    """Canonical bracket on (q_1..q_m, p_1..p_m):

        {f, g} = sum_i (df/dq_i dg/dp_i - df/dp_i dg/dq_i),

    which gives {q_i, p_j} = delta_ij.
    """

    def __init__(self, n_pairs: int):
        if n_pairs < 1:
            raise ValueError("need at least one canonical pair")
        self.n_pairs = int(n_pairs)
        self.n_vars = 2 * self.n_pairs

    def bracket(self, f, g):
        if f.n_vars != self.n_vars or g.n_vars != self.n_vars:
            raise ValueError("polynomial variable count does not match structure")
        m = self.n_pairs
        out = TruncatedPoly.zero(self.n_vars, min(f.max_degree, g.max_degree))
        for i in range(m):
            fq, fp = f.derivative(i), f.derivative(m + i)
            gq, gp = g.derivative(i), g.derivative(m + i)
            if not (fq.is_zero() or gp.is_zero()):
                out = out + fq * gp
            if not (fp.is_zero() or gq.is_zero()):
                out = out - fp * gq
        return out


class StructuredStructure(PoissonStructure):
    """Bracket from an antisymmetric matrix of polynomial entries:

        {f, g} = sum_ab Pi_ab  d_a f  d_b g.

    Used for the series Dirac bracket pulled into chart coordinates.
    """

    def __init__(self, pi):
        pi = np.asarray(pi, dtype=object)
        n = pi.shape[0]
        if pi.shape != (n, n):
            raise ValueError("Pi must be a square matrix of polynomials")
        for a in range(n):
            for b in range(n):
                s = pi[a, b] + pi[b, a]
                if s.max_abs_coeff() > 100 * COEFF_TOL:
                    raise ValueError("Pi is not antisymmetric (entry %d,%d)" % (a, b))
        self.pi = pi
        self.n_vars = n

    def bracket(self, f, g):
        if f.n_vars != self.n_vars or g.n_vars != self.n_vars:
            raise ValueError("polynomial variable count does not match structure")
        out = TruncatedPoly.zero(self.n_vars, min(f.max_degree, g.max_degree))
        df = [f.derivative(a) for a in range(self.n_vars)]
        dg = [g.derivative(b) for b in range(self.n_vars)]
        for a in range(self.n_vars):
            if df[a].is_zero():
                continue
            for b in range(self.n_vars):
                if dg[b].is_zero():
                    continue
                p = self.pi[a, b]
                if p.is_zero():
                    continue
                out = out + p * df[a] * dg[b]
        return out

    @classmethod
    def from_constant_matrix(cls, J, n_vars: int, max_degree: int):
        J = np.asarray(J, dtype=float)
        pi = np.empty(J.shape, dtype=object)
        for a in range(J.shape[0]):
            for b in range(J.shape[1]):
                pi[a, b] = TruncatedPoly.constant(J[a, b], n_vars, max_degree)
        return cls(pi)


# ----------------------------------------------------------------------
# module-level operations
# ----------------------------------------------------------------------


def poly_mul(a: TruncatedPoly, b: TruncatedPoly) -> TruncatedPoly:
    """Product truncated to the smaller of the two truncation orders."""
    return a * b


def poly_eval(f: TruncatedPoly, x) -> float:
    return f.eval(x)


def poly_gradient(f: TruncatedPoly, x) -> np.ndarray:
    return f.gradient(x)


def poisson_bracket(f: TruncatedPoly, g: TruncatedPoly,
                    ps: PoissonStructure) -> TruncatedPoly:
    """Poisson bracket {f, g} under the given structure."""
    return ps.bracket(f, g)


def compose_batch(polys, args):
    """Compose several polynomials against the same substitution list.

    Equivalent to [p.compose(args) for p in polys] but the monomial
    products of the arguments are memoized across all inputs, which is
    the dominant cost when the substituted maps are high degree.
    """
    polys = list(polys)
    if not polys:
        return []
    n_in = polys[0].n_vars
    for p in polys:
        if p.n_vars != n_in:
            raise ValueError("inputs disagree on variable count")
    if len(args) != n_in:
        raise ValueError("need one substitution per variable")
    n_out = args[0].n_vars
    cap = min(a.max_degree for a in args)
    cap = min(cap, max(p.max_degree for p in polys))
    one = TruncatedPoly.constant(1.0, n_out, cap)
    zero_exp = (0,) * n_in
    cache: dict[tuple, TruncatedPoly] = {zero_exp: one}

    def monomial_image(exp):
        hit = cache.get(exp)
        if hit is not None:
            return hit
        i = next(k for k, e in enumerate(exp) if e)
        prev = list(exp)
        prev[i] -= 1
        hit = monomial_image(tuple(prev)) * args[i]
        cache[exp] = hit
        return hit

    out = []
    for p in polys:
        acc = TruncatedPoly.zero(n_out, cap)
        for exp, c in sorted(p.terms.items(), key=_graded_key_kv):
            acc = acc + c * monomial_image(exp)
        out.append(acc)
    return out


def _graded_key_kv(kv):
    return _graded_key(kv[0])


def lie_transform(h: TruncatedPoly, gamma: TruncatedPoly,
                  ps: PoissonStructure) -> TruncatedPoly:
    """Time-one Lie-series transform exp(ad_Gamma) h, with
    ad_Gamma(.) = {., Gamma}.

    Gamma must have minimum total degree >= 3 so that each bracket
    application raises the minimum degree and the series terminates at
    the truncation order.  Quadratic generators are rejected as well as
    linear ones: ad of a quadratic preserves degree, so the graded
    series would not terminate.
    """
    if not gamma.is_zero() and gamma.min_degree() < 3:
        raise ValueError("generator must have minimum degree >= 3 "
                         "(got %d)" % gamma.min_degree())
    out = h
    term = h
    j = 0
    # each application raises the minimum degree by >= 1
    max_iter = h.max_degree + 2
    while not term.is_zero():
        j += 1
        if j > max_iter:
            raise RuntimeError("Lie series failed to terminate")
        term = ps.bracket(term, gamma) * (1.0 / j)
        out = out + term
    return out


def coeff_distance(a: TruncatedPoly, b: TruncatedPoly) -> float:
    """Largest absolute coefficient of a - b (coefficient-wise metric)."""
    return (a - b).max_abs_coeff()
