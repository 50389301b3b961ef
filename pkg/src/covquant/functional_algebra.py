"""Polynomial functionals of the mode amplitudes and the normal star-product.

A functional is stored in the monomial basis

    F(abar, a) = sum c[alpha, beta] prod_i abar_i^{alpha_i} prod_j a_j^{beta_j}

as a dict keyed by ``(alpha, beta)`` where both are *sorted tuples of mode
indices* (a multiset, ``(2, 2, 5)`` means ``abar_2**2 * abar_5``).  Sorting
makes the key canonical, so coefficient comparison is exact.

Normalizations follow the lattice quadrature ``int d^dk -> sum_i w``:

* normalized derivative ``D_{a_i} = sqrt(2 omega_i) / w * d/da_i``;
* bracket ``{F, G} = (2/i) sum_i w (D_a F D_abar G - D_abar F D_a G)``;
* normal cochain ``C_n(F, G) = (1/n!) sum_{i_1..i_n} prod (2 omega/w) d^n_a F d^n_abar G``.

The deformation parameter is kept as a formal index ``hbar``: the normal
product is ``F * G = sum_n hbar^n C_n(F, G)``.  With the generic notation
``sum lambda^n C_n`` this corresponds to ``lambda = i hbar / 2`` once the factor
``i/2`` is put back into the cochains, so ``(2/(i hbar)) (F*G - G*F)`` starts
with ``{F, G}``.
"""
from __future__ import annotations

import math
from collections import Counter
from itertools import combinations

import numpy as np

from .exceptions import CoefficientOverflowError, GridMismatchError
from .modes import ModeGrid, ModeVector

__all__ = [
    "PolyFunctional",
    "HbarSeries",
    "evaluate",
    "multiply",
    "derivative",
    "dnorm",
    "poisson",
    "normal_cochain",
    "star_normal",
    "star_bracket",
    "star_exponential",
    "free_hamiltonian",
    "star_series",
    "star_power_normal",
    "random_functional",
    "DEFAULT_MAX_DEGREE",
]

DEFAULT_MAX_DEGREE = 12


def _merge(s, t):
    return tuple(sorted(s + t))


def _multiset_minus(s, gamma):
    c = Counter(s)
    c.subtract(gamma)
    return tuple(sorted(c.elements()))


def _falling(s, gamma):
    """``prod_i s_i! / (s_i - gamma_i)!`` for multisets, 0 when gamma is not contained in s."""
    cs, cg = Counter(s), Counter(gamma)
    out = 1
    for i, g in cg.items():
        m = cs.get(i, 0)
        if g > m:
            return 0
        out *= math.perm(m, g)
    return out


def _subs_exact(s, n):
    """Distinct sub-multisets of size ``n`` of the sorted tuple ``s``."""
    return {tuple(c) for c in combinations(s, n)}


def _gamma_factorial(gamma):
    out = 1
    for m in Counter(gamma).values():
        out *= math.factorial(m)
    return out


class PolyFunctional:
    """Polynomial functional with canonical monomial storage.

    Parameters
    ----------
    grid : ModeGrid
    terms : dict, optional
        ``{(alpha, beta): coefficient}``; keys are canonicalized on input and
        duplicate keys are summed.
    max_degree : int
        Hard cap on total degree ``len(alpha) + len(beta)``.
    exact_through : int or None
        Degree through which the coefficients are exact.  ``None`` means no
        truncation has affected this functional.
    """

    __slots__ = ("grid", "terms", "max_degree", "exact_through")

    def __init__(self, grid: ModeGrid, terms=None, max_degree=DEFAULT_MAX_DEGREE, exact_through=None):
        self.grid = grid
        self.max_degree = int(max_degree)
        self.exact_through = exact_through
        clean = {}
        dropped = False
        for (alpha, beta), c in (terms or {}).items():
            alpha = tuple(sorted(int(i) for i in alpha))
            beta = tuple(sorted(int(i) for i in beta))
            for idx in alpha + beta:
                if not 0 <= idx < grid.size:
                    raise IndexError(f"mode index {idx} out of range for N={grid.size}")
            if len(alpha) + len(beta) > self.max_degree:
                if c != 0:
                    dropped = True
                continue
            c = complex(c)
            if not np.isfinite(c.real) or not np.isfinite(c.imag):
                raise ValueError("coefficients must be finite")
            clean[(alpha, beta)] = clean.get((alpha, beta), 0j) + c
        self.terms = {k: v for k, v in clean.items() if v != 0}
        if dropped:
            self.exact_through = _min_opt(self.exact_through, self.max_degree)

    # -- constructors ---------------------------------------------------------------
    @classmethod
    def constant(cls, grid, c=1.0, max_degree=DEFAULT_MAX_DEGREE):
        return cls(grid, {((), ()): c}, max_degree)

    @classmethod
    def zero(cls, grid, max_degree=DEFAULT_MAX_DEGREE):
        return cls(grid, {}, max_degree)

    @classmethod
    def monomial(cls, grid, alpha=(), beta=(), c=1.0, max_degree=DEFAULT_MAX_DEGREE):
        return cls(grid, {(tuple(alpha), tuple(beta)): c}, max_degree)

    @classmethod
    def abar(cls, grid, i, max_degree=DEFAULT_MAX_DEGREE):
        return cls.monomial(grid, (i,), (), 1.0, max_degree)

    @classmethod
    def a(cls, grid, i, max_degree=DEFAULT_MAX_DEGREE):
        return cls.monomial(grid, (), (i,), 1.0, max_degree)

    @classmethod
    def from_quadratic(cls, grid, Q, max_degree=DEFAULT_MAX_DEGREE, tol=0.0):
        """``sum_{ij} Q[i, j] abar_i a_j``."""
        Q = np.asarray(Q)
        terms = {}
        for i, j in zip(*np.nonzero(np.abs(Q) > tol)):
            terms[((int(i),), (int(j),))] = Q[i, j]
        return cls(grid, terms, max_degree)

    # -- structure -----------------------------------------------------------------
    def copy(self):
        out = PolyFunctional(self.grid, {}, self.max_degree, self.exact_through)
        out.terms = dict(self.terms)
        return out

    @property
    def degree(self):
        return max((len(a) + len(b) for a, b in self.terms), default=-1)

    @property
    def low_degree(self):
        """Lowest total degree present (``None`` for the zero functional)."""
        return min((len(a) + len(b) for a, b in self.terms), default=None)

    @property
    def truncated(self):
        return self.exact_through is not None

    @property
    def abar_degree(self):
        return max((len(a) for a, _ in self.terms), default=0)

    @property
    def a_degree(self):
        return max((len(b) for _, b in self.terms), default=0)

    def bidegrees(self):
        return sorted({(len(a), len(b)) for a, b in self.terms})

    def component(self, m, n):
        """Bidegree ``(m, n)`` part."""
        return self._filtered(lambda a, b: len(a) == m and len(b) == n)

    def homogeneous(self, deg):
        return self._filtered(lambda a, b: len(a) + len(b) == deg)

    def truncate(self, deg):
        """Drop all terms of total degree above ``deg``."""
        out = self._filtered(lambda a, b: len(a) + len(b) <= deg)
        if any(len(a) + len(b) > deg for a, b in self.terms):
            out.exact_through = _min_opt(out.exact_through, deg)
        out.max_degree = min(self.max_degree, max(deg, 0))
        return out

    def _filtered(self, keep):
        out = PolyFunctional(self.grid, {}, self.max_degree, self.exact_through)
        out.terms = {k: v for k, v in self.terms.items() if keep(*k)}
        return out

    def max_abs(self):
        return max((abs(v) for v in self.terms.values()), default=0.0)

    def dense(self, m, n):
        """Bidegree ``(m, n)`` coefficients as a dense array over sorted index pairs (for inspection)."""
        N = self.grid.size
        out = np.zeros((N,) * (m + n), complex)
        for (a, b), c in self.terms.items():
            if len(a) == m and len(b) == n:
                out[a + b] = c
        return out

    # -- arithmetic -----------------------------------------------------------------
    def _check(self, other):
        if not isinstance(other, PolyFunctional):
            raise TypeError("expected a PolyFunctional")
        if other.grid != self.grid:
            raise GridMismatchError("functionals live on different grids")

    def __add__(self, other):
        if isinstance(other, (int, float, complex)):
            other = PolyFunctional.constant(self.grid, other, self.max_degree)
        self._check(other)
        out = PolyFunctional(
            self.grid, {}, min(self.max_degree, other.max_degree), _min_opt(self.exact_through, other.exact_through)
        )
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0j) + v
        out.terms = {k: v for k, v in terms.items() if v != 0}
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        if isinstance(c, PolyFunctional):
            return multiply(self, c)
        c = complex(c)
        out = PolyFunctional(self.grid, {}, self.max_degree, self.exact_through)
        if c != 0:
            out.terms = {k: v * c for k, v in self.terms.items()}
        return out

    __rmul__ = __mul__

    def __call__(self, v):
        return evaluate(self, v)

    def allclose(self, other, atol=1e-12):
        return (self - other).max_abs() <= atol

    def __repr__(self):
        return f"PolyFunctional(N={self.grid.size}, terms={len(self.terms)}, degree={self.degree})"

    # -- serialization --------------------------------------------------------------
    def to_json(self):
        rows = []
        for (a, b) in sorted(self.terms, key=lambda k: (len(k[0]), len(k[1]), k)):
            c = self.terms[(a, b)]
            rows.append({"m": len(a), "n": len(b), "alpha": list(a), "beta": list(b), "re": c.real, "im": c.imag})
        return {
            "grid_hash": self.grid.grid_hash,
            "grid": self.grid.to_config(),
            "max_degree": self.max_degree,
            "terms": rows,
        }

    @classmethod
    def from_json(cls, payload, grid=None):
        g = ModeGrid.from_config(payload["grid"]) if grid is None else grid
        if payload.get("grid_hash", g.grid_hash) != g.grid_hash:
            raise GridMismatchError("serialized functional belongs to a different grid")
        terms = {}
        for r in payload["terms"]:
            key = (tuple(r["alpha"]), tuple(r["beta"]))
            terms[key] = terms.get(key, 0j) + complex(r["re"], r["im"])
        return cls(g, terms, payload.get("max_degree", DEFAULT_MAX_DEGREE))


def _min_opt(*vals):
    vals = [v for v in vals if v is not None]
    return min(vals) if vals else None


def _inf(v):
    return math.inf if v is None else v


def _combine_exactness(F, G, cap):
    """Degree through which a product-like combination of ``F`` and ``G`` is exact."""
    lf = F.low_degree if F.low_degree is not None else 0
    lg = G.low_degree if G.low_degree is not None else 0
    v = min(_inf(F.exact_through) + lg, _inf(G.exact_through) + lf)
    return None if v == math.inf else min(int(v), cap) if v >= 0 else 0


# -- evaluation and products ---------------------------------------------------------

def evaluate(F: PolyFunctional, v: ModeVector):
    """Exact monomial sum at ``v`` (batched ``v`` gives an array)."""
    if v.grid != F.grid:
        raise GridMismatchError("mode vector and functional live on different grids")
    out = np.zeros(v.a.shape[:-1], complex)
    for (alpha, beta), c in F.terms.items():
        term = np.full(v.a.shape[:-1], c, dtype=complex)
        for i in alpha:
            term = term * v.abar[..., i]
        for j in beta:
            term = term * v.a[..., j]
        out = out + term
    return out[()] if out.ndim == 0 else out


def multiply(F: PolyFunctional, G: PolyFunctional) -> PolyFunctional:
    """Pointwise product, truncated at ``min(max_degree)`` with the overflow flagged."""
    F._check(G)
    cap = min(F.max_degree, G.max_degree)
    terms = {}
    dropped = False
    for (a1, b1), c1 in F.terms.items():
        d1 = len(a1) + len(b1)
        for (a2, b2), c2 in G.terms.items():
            if d1 + len(a2) + len(b2) > cap:
                dropped = True
                continue
            key = (_merge(a1, a2), _merge(b1, b2))
            terms[key] = terms.get(key, 0j) + c1 * c2
    out = PolyFunctional(F.grid, {}, cap, _combine_exactness(F, G, cap))
    out.terms = {k: v for k, v in terms.items() if v != 0}
    if dropped:
        out.exact_through = _min_opt(out.exact_through, cap)
    return out


def derivative(F: PolyFunctional, slot: str, i: int) -> PolyFunctional:
    """Plain partial derivative ``dF/d abar_i`` (``slot='abar'``) or ``dF/d a_i`` (``slot='a'``)."""
    if slot not in ("a", "abar"):
        raise ValueError("slot must be 'a' or 'abar'")
    if not 0 <= i < F.grid.size:
        raise IndexError(f"mode index {i} out of range for N={F.grid.size}")
    terms = {}
    for (alpha, beta), c in F.terms.items():
        s = alpha if slot == "abar" else beta
        m = s.count(i)
        if m == 0:
            continue
        rest = list(s)
        rest.remove(i)
        key = (tuple(rest), beta) if slot == "abar" else (alpha, tuple(rest))
        terms[key] = terms.get(key, 0j) + m * c
    ex = None if F.exact_through is None else max(F.exact_through - 1, 0)
    out = PolyFunctional(F.grid, {}, F.max_degree, ex)
    out.terms = {k: v for k, v in terms.items() if v != 0}
    return out


def dnorm(F: PolyFunctional, slot: str, i: int) -> PolyFunctional:
    """Normalized functional derivative ``sqrt(2 omega_i) / w * dF/d(slot_i)``."""
    g = F.grid
    return derivative(F, slot, i) * (np.sqrt(2 * g.omegas[i]) / g.weight)


def poisson(F: PolyFunctional, G: PolyFunctional) -> PolyFunctional:
    """``(2/i) sum_i w (D_{a_i} F D_{abar_i} G - D_{abar_i} F D_{a_i} G)``."""
    F._check(G)
    g = F.grid
    out = PolyFunctional.zero(g, min(F.max_degree, G.max_degree))
    idx_a_F = {j for _, b in F.terms for j in b}
    idx_ab_F = {j for a, _ in F.terms for j in a}
    idx_a_G = {j for _, b in G.terms for j in b}
    idx_ab_G = {j for a, _ in G.terms for j in a}
    for i in sorted((idx_a_F & idx_ab_G) | (idx_ab_F & idx_a_G)):
        part = multiply(dnorm(F, "a", i), dnorm(G, "abar", i)) - multiply(dnorm(F, "abar", i), dnorm(G, "a", i))
        out = out + part * g.weight
    return out * (2 / 1j)


def normal_cochain(n: int, F: PolyFunctional, G: PolyFunctional) -> PolyFunctional:
    """Normal-ordered cochain ``C_n(F, G)``: ``n`` a-derivatives on ``F`` contracted with ``n`` abar-derivatives on ``G``.

    Implemented as a sum over multisets ``gamma`` of size ``n``, using
    ``(1/n!) sum_{ordered tuples} = sum_gamma 1/gamma!``.
    """
    if n < 0:
        raise ValueError("cochain order must be non-negative")
    F._check(G)
    if n == 0:
        return multiply(F, G)
    g = F.grid
    cap = min(F.max_degree, G.max_degree)
    kappa = 2 * g.omegas / g.weight
    terms = {}
    dropped = False
    for (a1, b1), c1 in F.terms.items():
        if len(b1) < n:
            continue
        subs1 = _subs_exact(b1, n)
        for (a2, b2), c2 in G.terms.items():
            if len(a2) < n:
                continue
            deg = len(a1) + len(b1) + len(a2) + len(b2) - 2 * n
            common = subs1 & _subs_exact(a2, n)
            if not common:
                continue
            if deg > cap:
                dropped = True
                continue
            for gamma in sorted(common):
                coef = c1 * c2 * _falling(b1, gamma) * _falling(a2, gamma) / _gamma_factorial(gamma)
                coef *= float(np.prod(kappa[list(gamma)]))
                key = (_merge(a1, _multiset_minus(a2, gamma)), _merge(_multiset_minus(b1, gamma), b2))
                terms[key] = terms.get(key, 0j) + coef
    ex = _combine_exactness(F, G, cap)
    ex = None if ex is None else max(ex - 2 * n, 0)
    out = PolyFunctional(g, {}, cap, ex)
    out.terms = {k: v for k, v in terms.items() if v != 0}
    if dropped:
        out.exact_through = _min_opt(out.exact_through, cap)
    return out


# -- hbar series -----------------------------------------------------------------------

class HbarSeries:
    """Finite series ``sum_{p=low}^{low+len-1} hbar^p F_p`` with PolyFunctional coefficients.

    ``low`` is 0 for ordinary formal series; negative ``low`` represents the
    Laurent windows produced by :func:`star_exponential`.
    """

    def __init__(self, coeffs, low=0, diagnostics=None):
        self.coeffs = list(coeffs)
        self.low = int(low)
        self.diagnostics = diagnostics

    @property
    def hbar_order(self):
        return self.low + len(self.coeffs) - 1

    @property
    def grid(self):
        return self.coeffs[0].grid

    def __getitem__(self, p):
        k = p - self.low
        if 0 <= k < len(self.coeffs):
            return self.coeffs[k]
        return PolyFunctional.zero(self.grid, self.coeffs[0].max_degree)

    def powers(self):
        return list(range(self.low, self.low + len(self.coeffs)))

    def __sub__(self, other):
        lo = min(self.low, other.low)
        hi = max(self.hbar_order, other.hbar_order)
        return HbarSeries([self[p] - other[p] for p in range(lo, hi + 1)], lo)

    def __add__(self, other):
        lo = min(self.low, other.low)
        hi = max(self.hbar_order, other.hbar_order)
        return HbarSeries([self[p] + other[p] for p in range(lo, hi + 1)], lo)

    def scale(self, c):
        return HbarSeries([f * c for f in self.coeffs], self.low)

    def max_abs_by_order(self):
        return {p: self[p].max_abs() for p in self.powers()}

    def __repr__(self):
        return f"HbarSeries(powers={self.low}..{self.hbar_order})"


def star_normal(F: PolyFunctional, G: PolyFunctional, hbar_order: int) -> HbarSeries:
    """Normal star-product ``F *_N G`` through ``hbar**hbar_order``."""
    if hbar_order < 0:
        raise ValueError("hbar_order must be >= 0")
    return HbarSeries([normal_cochain(n, F, G) for n in range(hbar_order + 1)])


def star_series(A: HbarSeries, B: HbarSeries, hbar_order: int) -> HbarSeries:
    """Star product of two hbar series, collected through ``hbar_order`` (both with ``low >= 0``)."""
    g = A.grid
    cap = min(A.coeffs[0].max_degree, B.coeffs[0].max_degree)
    lo = A.low + B.low
    out = [PolyFunctional.zero(g, cap) for _ in range(lo, hbar_order + 1)]
    for p in A.powers():
        for q in B.powers():
            for n in range(0, hbar_order - p - q + 1):
                c = normal_cochain(n, A[p], B[q])
                if c.terms or c.truncated:
                    out[p + q + n - lo] = out[p + q + n - lo] + c
    return HbarSeries(out, lo)


def star_bracket(F: PolyFunctional, G: PolyFunctional, hbar_order: int) -> HbarSeries:
    """``(2/(i hbar)) (F*G - G*F)``; the ``hbar**0`` coefficient is the Poisson bracket."""
    if hbar_order < 0:
        raise ValueError("hbar_order must be >= 0")
    coeffs = [(normal_cochain(n + 1, F, G) - normal_cochain(n + 1, G, F)) * (2 / 1j) for n in range(hbar_order + 1)]
    return HbarSeries(coeffs)


def star_power_normal(F: PolyFunctional, k: int, hbar_order: int) -> HbarSeries:
    """``(*_N F)^k`` left-associated, through ``hbar**hbar_order``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    one = HbarSeries([PolyFunctional.constant(F.grid, 1.0, F.max_degree)])
    out = one
    base = HbarSeries([F])
    for _ in range(k):
        out = star_series(out, base, hbar_order)
    if len(out.coeffs) < hbar_order + 1:
        out = HbarSeries(out.coeffs + [PolyFunctional.zero(F.grid, F.max_degree)] * (hbar_order + 1 - len(out.coeffs)))
    return out


def star_exponential(F: PolyFunctional, t: float, hbar_order: int, term_count: int, overflow_bound=1e12) -> HbarSeries:
    """Truncated star exponential ``sum_{n<=term_count} (1/n!) (t/(i hbar))^n (*F)^n``.

    Powers of ``hbar`` are collected in the window ``[-term_count, hbar_order]``.
    ``diagnostics`` on the result maps each power ``p`` to
    ``{"partial_max": max|partial sum|, "last_term_max": max|last nonzero contribution|}``;
    a large last term signals that the series in ``1/hbar`` has not settled.
    """
    if term_count < 0:
        raise ValueError("term_count must be >= 0")
    g = F.grid
    lo = -term_count
    window = list(range(lo, hbar_order + 1))
    acc = {p: PolyFunctional.zero(g, F.max_degree) for p in window}
    last = {p: 0.0 for p in window}
    acc[0] = acc[0] + PolyFunctional.constant(g, 1.0, F.max_degree)
    last[0] = 1.0
    power = HbarSeries([PolyFunctional.constant(g, 1.0, F.max_degree)])
    base = HbarSeries([F])
    for n in range(1, term_count + 1):
        # (*F)^n is needed through hbar^(hbar_order + n) to fill the window after the hbar^-n shift
        power = star_series(power, base, hbar_order + n)
        pref = (t / 1j) ** n / math.factorial(n)
        for q in power.powers():
            p = q - n
            if p not in acc:
                continue
            contrib = power[q] * pref
            mag = contrib.max_abs()
            if not np.isfinite(mag) or mag > overflow_bound:
                raise CoefficientOverflowError(
                    f"star exponential coefficient at hbar^{p} reached {mag:.3e} (bound {overflow_bound:.1e}) at term {n}"
                )
            acc[p] = acc[p] + contrib
            if contrib.terms:
                last[p] = mag
    diag = {p: {"partial_max": acc[p].max_abs(), "last_term_max": last[p]} for p in window}
    return HbarSeries([acc[p] for p in window], lo, diagnostics=diag)


def free_hamiltonian(grid: ModeGrid, max_degree=DEFAULT_MAX_DEGREE) -> PolyFunctional:
    """Lattice free energy ``H0 = sum_i (w/2) abar_i a_i``."""
    return PolyFunctional(grid, {((i,), (i,)): grid.weight / 2 for i in range(grid.size)}, max_degree)


def random_functional(grid, rng, n_terms=6, max_deg=3, modes=None, max_degree=DEFAULT_MAX_DEGREE, scale=1.0):
    """Sparse random functional with complex coefficients; used by tests and the CLI."""
    modes = grid.size if modes is None else modes
    terms = {}
    for _ in range(n_terms):
        deg = int(rng.integers(0, max_deg + 1))
        m = int(rng.integers(0, deg + 1))
        alpha = tuple(int(x) for x in rng.integers(0, modes, size=m))
        beta = tuple(int(x) for x in rng.integers(0, modes, size=deg - m))
        key = (tuple(sorted(alpha)), tuple(sorted(beta)))
        terms[key] = terms.get(key, 0j) + scale * complex(rng.normal(), rng.normal())
    return PolyFunctional(grid, terms, max_degree)
