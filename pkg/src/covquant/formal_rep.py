"""Formal series of symmetric multilinear maps and nonlinear Lie-algebra representations.

A :class:`FormalSeries` ``F = sum_{n>=1} f^n`` is stored as dense tensors
``t[n][out, in_1, ..., in_n]`` symmetric in the input slots.  Products:

* composition ``(F o H)^n = sum_p sum_{n_1+..+n_p=n} f^p(h^{n_1}, ..., h^{n_p})``;
* the bullet ``(F . H)^n = sum_p p f^p(h^{n-p+1}(x), x, ..., x)``, i.e.
  ``(F . H)(x) = DF(x) H(x)``;
* the bracket ``[F, H] = F . H - H . F``, which on linear series is the
  matrix commutator ``f h - h f``.  As polynomial vector fields this is the
  negative of the usual vector-field bracket ``DH F - DF H``.

Every result is truncated at the smaller ``degree_cap`` of its operands.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, permutations

import numpy as np

from .exceptions import NotInvertibleError, ResonanceError

__all__ = [
    "FormalSeries",
    "compose",
    "bullet",
    "lie_bracket",
    "invert",
    "formal_flow",
    "symmetrize",
    "NonlinearRep",
    "ClosureReport",
    "ResidualReport",
    "check_rep",
    "linearize",
    "poincare_basis",
    "poincare_structure_constants",
    "probe_bracket",
]


def symmetrize(t):
    """Average a tensor ``t[out, in_1..in_n]`` over permutations of its input axes."""
    n = t.ndim - 1
    if n <= 1:
        return t
    acc = np.zeros_like(t)
    perms = list(permutations(range(1, n + 1)))
    for p in perms:
        acc += np.transpose(t, (0,) + p)
    return acc / len(perms)


def _apply_slots(f, hs):
    """Contract the input slots of ``f`` with the output axes of ``hs`` in order."""
    out = f
    for h in hs:
        out = np.tensordot(out, h, axes=([1], [0]))
    return out


def _compositions_multiset(n, p):
    """Non-increasing partitions of ``n`` into ``p`` positive parts with their ordered-arrangement count."""
    out = []

    def rec(rem, parts, maxpart):
        if len(parts) == p:
            if rem == 0:
                counts = {}
                for x in parts:
                    counts[x] = counts.get(x, 0) + 1
                mult = math.factorial(p)
                for c in counts.values():
                    mult //= math.factorial(c)
                out.append((tuple(parts), mult))
            return
        left = p - len(parts) - 1
        for x in range(min(maxpart, rem - left), 0, -1):
            rec(rem - x, parts + [x], x)

    rec(n, [], n)
    return out


class FormalSeries:
    """Truncated formal series of symmetric multilinear maps on ``C^dim``.

    Parameters
    ----------
    dim : int
        Phase-space dimension (``2N`` for mode space, abar block first).
    terms : dict
        ``{n: tensor of shape (dim,)*(n+1)}``; symmetrized on input unless
        ``assume_symmetric`` is set.
    degree_cap : int
    """

    def __init__(self, dim, terms=None, degree_cap=3, assume_symmetric=False):
        self.dim = int(dim)
        self.degree_cap = int(degree_cap)
        if self.degree_cap < 1:
            raise ValueError("degree_cap must be >= 1")
        self.terms = {}
        for n, t in (terms or {}).items():
            n = int(n)
            if n < 1:
                raise ValueError("formal series have no constant term")
            if n > self.degree_cap:
                continue
            t = np.asarray(t, dtype=complex)
            if t.shape != (self.dim,) * (n + 1):
                raise ValueError(f"degree-{n} tensor has shape {t.shape}, expected {(self.dim,) * (n + 1)}")
            self.terms[n] = t if assume_symmetric else symmetrize(t)

    # -- constructors ---------------------------------------------------------------
    @classmethod
    def identity(cls, dim, degree_cap=3):
        return cls(dim, {1: np.eye(dim)}, degree_cap, assume_symmetric=True)

    @classmethod
    def zero(cls, dim, degree_cap=3):
        return cls(dim, {}, degree_cap)

    @classmethod
    def linear(cls, matrix, degree_cap=3):
        m = np.asarray(matrix, dtype=complex)
        return cls(m.shape[0], {1: m}, degree_cap, assume_symmetric=True)

    def copy(self):
        return FormalSeries(self.dim, {n: t.copy() for n, t in self.terms.items()}, self.degree_cap, True)

    def term(self, n):
        t = self.terms.get(n)
        return np.zeros((self.dim,) * (n + 1), complex) if t is None else t

    def truncate(self, cap):
        return FormalSeries(self.dim, {n: t for n, t in self.terms.items() if n <= cap}, min(cap, self.degree_cap), True)

    def with_cap(self, cap):
        return FormalSeries(self.dim, {n: t for n, t in self.terms.items() if n <= cap}, cap, True)

    def below(self, n):
        """Terms of degree < n."""
        return FormalSeries(self.dim, {k: t for k, t in self.terms.items() if k < n}, self.degree_cap, True)

    # -- arithmetic -----------------------------------------------------------------
    def _check(self, other):
        if not isinstance(other, FormalSeries):
            raise TypeError("expected a FormalSeries")
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other):
        self._check(other)
        cap = min(self.degree_cap, other.degree_cap)
        keys = set(self.terms) | set(other.terms)
        return FormalSeries(
            self.dim, {n: self.term(n) + other.term(n) for n in keys if n <= cap}, cap, assume_symmetric=True
        )

    def __sub__(self, other):
        return self + other * -1

    def __mul__(self, c):
        return FormalSeries(self.dim, {n: t * c for n, t in self.terms.items()}, self.degree_cap, True)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1

    def max_abs(self, n=None):
        if n is not None:
            t = self.terms.get(n)
            return 0.0 if t is None else float(np.abs(t).max(initial=0.0))
        return max((float(np.abs(t).max(initial=0.0)) for t in self.terms.values()), default=0.0)

    def residual_by_degree(self):
        return {n: self.max_abs(n) for n in range(1, self.degree_cap + 1)}

    # -- evaluation -----------------------------------------------------------------
    def multilinear(self, n, args):
        """``f^n(args[0], ..., args[n-1])`` with batched arguments of shape ``(..., dim)``."""
        t = self.terms.get(n)
        lead = np.broadcast_shapes(*(np.shape(a)[:-1] for a in args))
        if t is None:
            return np.zeros(lead + (self.dim,), complex)
        L = "".join(chr(ord("A") + i) for i in range(len(lead)))
        slots = "abcdefghijklmnopqrstuvwxy"[:n]
        spec = ",".join([f"z{slots}"] + [f"{L}{s}" for s in slots]) + f"->{L}z"
        args = [np.broadcast_to(a, lead + (self.dim,)) for a in args]
        return np.einsum(spec, t, *args, optimize=True)

    def homogeneous(self, n, x):
        return self.multilinear(n, [x] * n)

    def __call__(self, x):
        x = np.asarray(x, dtype=complex)
        out = np.zeros(x.shape, complex)
        for n in sorted(self.terms):
            out = out + self.homogeneous(n, x)
        return out

    # -- serialization --------------------------------------------------------------
    def to_json(self, tol=0.0):
        rows = []
        for n in sorted(self.terms):
            t = self.terms[n]
            for idx in _sorted_multi_indices(self.dim, n):
                col = t[(slice(None),) + idx]
                for o in np.flatnonzero(np.abs(col) > tol):
                    c = col[o]
                    rows.append({"n": n, "out": int(o), "in_multi_index": list(idx), "re": float(c.real), "im": float(c.imag)})
        return {"dim": self.dim, "degree_cap": self.degree_cap, "terms": rows}

    @classmethod
    def from_json(cls, payload):
        dim, cap = int(payload["dim"]), int(payload["degree_cap"])
        terms = {}
        for r in payload["terms"]:
            n = int(r["n"])
            t = terms.setdefault(n, np.zeros((dim,) * (n + 1), complex))
            val = complex(r["re"], r["im"])
            for perm in set(permutations(r["in_multi_index"])):
                t[(int(r["out"]),) + tuple(perm)] = val
        return cls(dim, terms, cap, assume_symmetric=True)

    def __repr__(self):
        return f"FormalSeries(dim={self.dim}, degrees={sorted(self.terms)}, cap={self.degree_cap})"


def _sorted_multi_indices(dim, n):
    return list(combinations_with_replacement(range(dim), n))


# -- products --------------------------------------------------------------------------

def compose(F: FormalSeries, H: FormalSeries) -> FormalSeries:
    """Composition ``F o H`` truncated at the smaller cap."""
    F._check(H)
    cap = min(F.degree_cap, H.degree_cap)
    out = {}
    for n in range(1, cap + 1):
        acc = None
        for p in range(1, n + 1):
            f = F.terms.get(p)
            if f is None:
                continue
            for parts, mult in _compositions_multiset(n, p):
                if any(q not in H.terms for q in parts):
                    continue
                t = _apply_slots(f, [H.terms[q] for q in parts]) * mult
                acc = t if acc is None else acc + t
        if acc is not None:
            out[n] = symmetrize(acc)
    return FormalSeries(F.dim, out, cap, assume_symmetric=True)


def bullet(F: FormalSeries, H: FormalSeries) -> FormalSeries:
    """``(F . H)(x) = DF(x) H(x)`` degree by degree."""
    F._check(H)
    cap = min(F.degree_cap, H.degree_cap)
    out = {}
    for n in range(1, cap + 1):
        acc = None
        for p in range(1, n + 1):
            f, h = F.terms.get(p), H.terms.get(n - p + 1)
            if f is None or h is None:
                continue
            t = np.tensordot(f, h, axes=([1], [0])) * p
            acc = t if acc is None else acc + t
        if acc is not None:
            out[n] = symmetrize(acc)
    return FormalSeries(F.dim, out, cap, assume_symmetric=True)


def lie_bracket(F: FormalSeries, H: FormalSeries) -> FormalSeries:
    return bullet(F, H) - bullet(H, F)


def invert(F: FormalSeries) -> FormalSeries:
    """Two-sided inverse under composition by degree-recursive back-substitution."""
    f1 = F.terms.get(1)
    if f1 is None:
        raise NotInvertibleError("not invertible at linear order: no degree-1 term")
    cond = np.linalg.cond(f1)
    if not np.isfinite(cond) or cond > 1e14:
        raise NotInvertibleError(f"not invertible at linear order (condition number {cond:.3e})")
    g1 = np.linalg.inv(f1)
    G = FormalSeries(F.dim, {1: g1}, F.degree_cap, assume_symmetric=True)
    for n in range(2, F.degree_cap + 1):
        # degree n of F o G_{<n}; the f^1 g^n contribution is what we solve for
        r = compose(F, G.with_cap(n)).term(n)
        G.terms[n] = -np.tensordot(g1, r, axes=([1], [0]))
    return G


def formal_flow(X: FormalSeries, t=1.0) -> FormalSeries:
    """Time-``t`` flow of the vector field ``X`` as a Lie series ``sum_k t^k/k! Id . X . ... . X``.

    ``X`` must have no linear part so that the series is finite at each degree.
    """
    if 1 in X.terms and np.any(X.terms[1] != 0):
        raise ValueError("formal_flow needs a vector field without linear part")
    term = FormalSeries.identity(X.dim, X.degree_cap)
    out = term.copy()
    for k in range(1, X.degree_cap):
        term = bullet(term, X) * (t / k)
        out = out + term
    return out


# -- Poincare algebra ---------------------------------------------------------------------

def poincare_basis(d):
    """Labels ``P0, P1..Pd, Mij (1<=i<j<=d), M0j``."""
    labels = ["P0"] + [f"P{j}" for j in range(1, d + 1)]
    labels += [f"M{i}{j}" for i in range(1, d + 1) for j in range(i + 1, d + 1)]
    labels += [f"M0{j}" for j in range(1, d + 1)]
    return labels


def _split_m(label):
    return int(label[1]), int(label[2])


def poincare_structure_constants(d):
    """``{(X, Y): {Z: c}}`` with ``[X, Y] = sum c Z`` for the operators ``P0 = d_t``, ``Pj = d_j``,
    ``Mij = x_i d_j - x_j d_i``, ``M0j = t d_j + x_j d_t`` under the commutator of differential operators.
    """
    basis = poincare_basis(d)
    table = {}

    def add(X, Y, Z, c):
        if c == 0:
            return
        table.setdefault((X, Y), {})
        table[(X, Y)][Z] = table[(X, Y)].get(Z, 0) + c
        table.setdefault((Y, X), {})
        table[(Y, X)][Z] = table[(Y, X)].get(Z, 0) - c

    def M(i, j):
        # antisymmetric label helper returning (label, sign)
        if i == j:
            return None, 0
        if i == 0:
            return f"M0{j}", 1
        if j == 0:
            return f"M0{i}", -1
        return (f"M{i}{j}", 1) if i < j else (f"M{j}{i}", -1)

    for j in range(1, d + 1):
        add(f"M0{j}", "P0", f"P{j}", -1)
        for k in range(1, d + 1):
            if j == k:
                add(f"M0{j}", f"P{k}", "P0", -1)
    for i in range(1, d + 1):
        for j in range(i + 1, d + 1):
            Mij = f"M{i}{j}"
            for k in range(1, d + 1):
                if j == k:
                    add(Mij, f"P{k}", f"P{i}", 1)
                if i == k:
                    add(Mij, f"P{k}", f"P{j}", -1)
                # [Mij, M0k] = d_jk M0i - d_ik M0j
                if j == k:
                    add(Mij, f"M0{k}", f"M0{i}", 1)
                if i == k:
                    add(Mij, f"M0{k}", f"M0{j}", -1)
            for k in range(1, d + 1):
                for l in range(k + 1, d + 1):
                    if (i, j) >= (k, l):
                        continue
                    Mkl = f"M{k}{l}"
                    # [Mij, Mkl] = d_jk Mil - d_ik Mjl - d_jl Mik + d_il Mjk
                    terms = []
                    if j == k:
                        terms.append((i, l, 1))
                    if i == k:
                        terms.append((j, l, -1))
                    if j == l:
                        terms.append((i, k, -1))
                    if i == l:
                        terms.append((j, k, 1))
                    for (p, q, s) in terms:
                        lab, sg = M(p, q)
                        if lab is not None:
                            add(Mij, Mkl, lab, s * sg)
    for i in range(1, d + 1):
        for j in range(i + 1, d + 1):
            add(f"M0{i}", f"M0{j}", f"M{i}{j}", 1)
    return {k: {z: c for z, c in v.items() if c != 0} for k, v in table.items() if k[0] in basis}


# -- representations --------------------------------------------------------------------

@dataclass
class NonlinearRep:
    """Lie-algebra basis with its images as formal series.

    ``images`` maps each label to a :class:`FormalSeries` (or any object with
    ``terms``/``multilinear``); ``structure_constants`` maps ordered pairs to
    ``{label: coefficient}``.  ``metadata`` may carry ``mass`` and
    per-pair tolerances.
    """

    basis: list
    images: dict
    structure_constants: dict
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self):
        return next(iter(self.images.values())).dim

    @property
    def degree_cap(self):
        return min(s.degree_cap for s in self.images.values())

    def linear_part(self):
        return NonlinearRep(
            list(self.basis),
            {k: FormalSeries(v.dim, {1: v.term(1)}, v.degree_cap, True) for k, v in self.images.items()},
            self.structure_constants,
            dict(self.metadata),
        )

    def combination(self, coeffs):
        out = FormalSeries.zero(self.dim, self.degree_cap)
        for z, c in coeffs.items():
            out = out + self.images[z] * c
        return out


@dataclass
class ClosureReport:
    residuals: dict  # (X, Y) -> {n: residual}
    tolerance: float
    flagged: list
    probe_residuals: dict = field(default_factory=dict)

    @property
    def max_residual(self):
        return max((max(v.values(), default=0.0) for v in self.residuals.values()), default=0.0)

    def to_json(self):
        return {
            "tolerance": self.tolerance,
            "pairs": [
                {"X": x, "Y": y, "residual_by_degree": {str(n): r for n, r in sorted(v.items())}}
                for (x, y), v in sorted(self.residuals.items())
            ],
            "flagged": [list(p) for p in self.flagged],
        }


def _pairs(basis):
    return [(basis[i], basis[j]) for i in range(len(basis)) for j in range(i + 1, len(basis))]


def check_rep(rep: NonlinearRep, tol=1e-12, pairs=None, pair_tolerance=None) -> ClosureReport:
    """Coefficient residuals ``max|[T_X, T_Y]^n - (sum c T_Z)^n|`` per pair and degree."""
    residuals, flagged = {}, []
    pair_tolerance = pair_tolerance or {}
    for X, Y in pairs or _pairs(rep.basis):
        lhs = lie_bracket(rep.images[X], rep.images[Y])
        rhs = rep.combination(rep.structure_constants.get((X, Y), {}))
        res = (lhs - rhs).residual_by_degree()
        residuals[(X, Y)] = res
        if max(res.values(), default=0.0) > pair_tolerance.get((X, Y), tol):
            flagged.append((X, Y))
    return ClosureReport(residuals, tol, flagged)


def probe_bracket(F, H, psi, n):
    """Degree-``n`` part of ``[F, H]`` evaluated on the diagonal ``(psi, ..., psi)`` without forming tensors.

    ``F`` and ``H`` only need ``terms`` and ``multilinear``.
    """
    out = 0
    for A, B, sign in ((F, H, 1), (H, F, -1)):
        for p in range(1, n + 1):
            q = n - p + 1
            if p not in A.terms or q not in B.terms:
                continue
            inner = B.multilinear(q, [psi] * q)
            out = out + sign * p * A.multilinear(p, [inner] + [psi] * (p - 1))
    if isinstance(out, int):
        return np.zeros_like(np.asarray(psi, dtype=complex))
    return out


@dataclass
class ResidualReport:
    """Outcome of :func:`linearize`."""

    intertwining: dict  # label -> {n: max residual}
    min_denominator: dict  # n -> smallest |lambda_out - sum lambda_in| over components with nonzero source
    near_resonant: dict  # n -> list of (out, inputs, denominator)
    resonant_skipped: dict  # n -> list of (out, inputs, denominator, source)
    resonance_tol: float

    def to_json(self):
        return {
            "resonance_tol": self.resonance_tol,
            "intertwining": {g: {str(n): r for n, r in sorted(v.items())} for g, v in self.intertwining.items()},
            "min_denominator": {str(n): v for n, v in sorted(self.min_denominator.items())},
            "near_resonant": {str(n): v for n, v in sorted(self.near_resonant.items())},
            "resonant_skipped": {str(n): v for n, v in sorted(self.resonant_skipped.items())},
        }


def intertwining_residual(T: FormalSeries, omega: FormalSeries, T1: FormalSeries) -> FormalSeries:
    """``T o Omega - Omega . T1``."""
    return compose(T, omega) - bullet(omega, T1)


def _list_tuples(mask, values_d, values_r, limit):
    idx = np.argwhere(mask)
    out = []
    for row in idx[:limit]:
        o, ins = int(row[0]), tuple(int(x) for x in row[1:])
        if list(ins) != sorted(ins):
            continue
        item = [o, list(ins), float(abs(values_d[tuple(row)]))]
        if values_r is not None:
            r = values_r[tuple(row)]
            item.append([float(r.real), float(r.imag)])
        out.append(item)
    return out


def linearize(
    rep: NonlinearRep,
    resonance_tol=None,
    generator="P0",
    degree_cap=None,
    on_resonance="raise",
    rtol=1e-10,
    atol=1e-14,
    listing_limit=200,
):
    """Formal linearization ``Omega = Id + sum_{n>=2} Omega^n`` with ``T_X o Omega = Omega . T1_X`` for ``X = generator``.

    Solves ``(lambda_out - sum lambda_in) Omega^n = -(T o Omega_{<n})^n``
    component-wise, using the diagonal of ``T1_X`` as eigenvalues, then
    reports intertwining residuals for every generator of ``rep``.

    Components whose denominator falls below ``resonance_tol`` and whose
    source is negligible are set to zero and listed as near-resonant.  A
    non-negligible source over a small denominator raises
    :class:`ResonanceError` (``on_resonance='raise'``) or is set to zero and
    recorded in ``resonant_skipped`` (``on_resonance='skip'``).

    Returns
    -------
    omega : FormalSeries
    report : ResidualReport
    """
    if on_resonance not in ("raise", "skip"):
        raise ValueError("on_resonance must be 'raise' or 'skip'")
    T = rep.images[generator]
    cap = T.degree_cap if degree_cap is None else min(degree_cap, T.degree_cap)
    if resonance_tol is None:
        resonance_tol = rep.metadata.get("mass", 1.0) / 100
    if resonance_tol <= 0:
        raise ValueError("resonance_tol must be positive")
    t1 = T.term(1)
    lam = np.diag(t1).copy()
    if np.abs(t1 - np.diag(lam)).max(initial=0.0) > 1e-12 * max(1.0, np.abs(lam).max()):
        raise ValueError(f"T1_{generator} is not diagonal in the chosen basis")
    dim = T.dim
    omega = FormalSeries.identity(dim, cap)
    min_den, near, skipped = {}, {}, {}
    for n in range(2, cap + 1):
        src = -compose(T, omega.with_cap(n)).term(n)
        den = lam.reshape((dim,) + (1,) * n).copy()
        for k in range(n):
            den = den - lam.reshape((1,) * (k + 1) + (dim,) + (1,) * (n - k - 1))
        den = np.broadcast_to(den, src.shape)
        big = np.abs(src) > atol + rtol * float(np.abs(src).max(initial=0.0))
        small = np.abs(den) < resonance_tol
        bad = small & big
        min_den[n] = float(np.abs(den[big]).min()) if big.any() else float("inf")
        near[n] = _list_tuples(small & ~big, den, None, listing_limit)
        if bad.any():
            tuples = _list_tuples(bad, den, src, listing_limit)
            if on_resonance == "raise":
                raise ResonanceError(
                    f"resonant denominator at degree {n}: {int(bad.sum())} components with "
                    f"|lambda_out - sum lambda_in| < {resonance_tol:g} and nonzero source, first {tuples[:3]}",
                    degree=n,
                    tuples=tuples,
                )
            skipped[n] = tuples
        with np.errstate(divide="ignore", invalid="ignore"):
            sol = np.where(small, 0.0, src / np.where(small, 1.0, den))
        omega.terms[n] = symmetrize(sol)
    T1 = {k: FormalSeries(v.dim, {1: v.term(1)}, cap, True) for k, v in rep.images.items()}
    inter = {}
    for label in rep.basis:
        img = rep.images[label]
        if not hasattr(img, "terms") or not isinstance(img, FormalSeries):
            continue
        inter[label] = intertwining_residual(img.with_cap(cap), omega, T1[label]).residual_by_degree()
    return omega, ResidualReport(inter, min_den, near, skipped, float(resonance_tol))
