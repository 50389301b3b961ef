"""Star products transported by a linearizing map, and the star-power identity for the Hamiltonian.

Given ``Omega`` with ``H o Omega = H0``, define

    (F *_pm G) o Omega = (F o Omega) *_N (G o Omega),

so that ``(*_pm H)^k = (*_N H0)^k o Omega^{-1}``.  In formal mode ``Omega`` is
a :class:`~covquant.formal_rep.FormalSeries` and everything stays in the
polynomial algebra.  In numeric mode ``Omega`` is a numerical wave operator;
``F o Omega`` is no longer polynomial, so identities are checked pointwise
at sample points, through order ``hbar^1`` (first derivatives of ``H o Omega``
obtained by a transposed-Jacobian pass through the integrator).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NotInvertibleError
from .formal_rep import FormalSeries, compose, invert
from .functional_algebra import (
    HbarSeries,
    PolyFunctional,
    evaluate,
    multiply,
    star_power_normal,
    star_series,
)
from .kleingordon import (
    FieldOperators,
    Potential,
    StrangIntegrator,
    WaveOperatorEstimate,
    _free_phase_stacked,
    energy,
)
from .modes import ModeGrid, ModeVector

__all__ = [
    "pullback",
    "series_components",
    "PushedStarProduct",
    "star_pm",
    "star_power",
    "check_ham_identity",
    "split_residuals",
    "NumericPullbackGradient",
    "hamiltonian_field",
    "check_ham_identity_numeric",
    "star_pm_series",
    "stacked_poisson",
]


# -- formal mode ------------------------------------------------------------------------------

def _coord_key(grid, c):
    N = grid.size
    return ((c,), ()) if c < N else ((), (c - N,))


def series_components(omega: FormalSeries, grid: ModeGrid, max_degree):
    """Each output coordinate of ``omega`` as a PolyFunctional in the stacked coordinates."""
    from itertools import combinations_with_replacement
    from math import factorial

    N = grid.size
    if omega.dim != 2 * N:
        raise ValueError(f"series dimension {omega.dim} does not match 2N = {2 * N}")
    comps = [dict() for _ in range(omega.dim)]
    for n, t in omega.terms.items():
        if n > max_degree:
            continue
        for idx in combinations_with_replacement(range(omega.dim), n):
            col = t[(slice(None),) + idx]
            nz = np.flatnonzero(col)
            if nz.size == 0:
                continue
            counts = {}
            for c in idx:
                counts[c] = counts.get(c, 0) + 1
            mult = factorial(n)
            for m in counts.values():
                mult //= factorial(m)
            alpha = tuple(c for c in idx if c < N)
            beta = tuple(c - N for c in idx if c >= N)
            for o in nz:
                key = (alpha, beta)
                comps[o][key] = comps[o].get(key, 0j) + mult * col[o]
    ex = None if omega.degree_cap >= max_degree else omega.degree_cap
    return [PolyFunctional(grid, c, max_degree, ex) for c in comps]


def pullback(F: PolyFunctional, omega: FormalSeries, max_degree=None) -> PolyFunctional:
    """``F o Omega`` by substituting the series into every monomial, truncated at ``max_degree``.

    ``exact_through`` of the result records the degree through which the
    truncation of ``omega`` (known through ``omega.degree_cap``) cannot
    reach: ``min(exact(F), cap + max(low(F), 1) - 1, max_degree)``.
    """
    g = F.grid
    D = F.max_degree if max_degree is None else max_degree
    comps = series_components(omega, g, D)
    N = g.size
    out = PolyFunctional.zero(g, D)
    cache = {}
    for (alpha, beta), c in F.terms.items():
        term = PolyFunctional.constant(g, c, D)
        for i in alpha:
            term = multiply(term, comps[i])
        for j in beta:
            term = multiply(term, comps[N + j])
        out = out + term
    low = F.low_degree if F.low_degree is not None else 0
    bound = omega.degree_cap + max(low, 1) - 1
    ex = min(v for v in (F.exact_through, bound, D) if v is not None)
    out.exact_through = None if (ex >= D and F.exact_through is None and omega.degree_cap >= D) else ex
    return out


@dataclass
class PushedStarProduct:
    """Star product transported by ``omega``.

    Parameters
    ----------
    omega : FormalSeries or WaveOperatorEstimate
    omega_inverse : same kind, optional
        Computed by :func:`~covquant.formal_rep.invert` in formal mode.
    mode : {'formal', 'numeric'}
    """

    omega: object
    omega_inverse: object = None
    mode: str = "formal"
    tolerance: float = 1e-10
    samples: object = None
    roundtrip_error: float = field(default=0.0, init=False)

    def __post_init__(self):
        if self.mode not in ("formal", "numeric"):
            raise ValueError("mode must be 'formal' or 'numeric'")
        if self.mode == "formal":
            if self.omega_inverse is None:
                self.omega_inverse = invert(self.omega)
            cap = min(self.omega.degree_cap, self.omega_inverse.degree_cap)
            I = FormalSeries.identity(self.omega.dim, cap)
            err = max(
                (compose(self.omega, self.omega_inverse) - I).max_abs(),
                (compose(self.omega_inverse, self.omega) - I).max_abs(),
            )
            self.roundtrip_error = err
            if err > self.tolerance:
                raise NotInvertibleError(f"omega_inverse is not a two-sided inverse (residual {err:.3e})")
        else:
            if not isinstance(self.omega, WaveOperatorEstimate):
                raise TypeError("numeric mode expects a WaveOperatorEstimate")
            if self.samples is not None:
                z = self.samples.stacked()
                back = self.omega.inverse_stacked(self.omega.apply_stacked(z))
                self.roundtrip_error = float(np.abs(back - z).max())
                if self.roundtrip_error > self.tolerance:
                    raise NotInvertibleError(f"numeric round trip error {self.roundtrip_error:.3e} above tolerance")

    def pull(self, F, max_degree=None):
        return pullback(F, self.omega, max_degree)

    def push(self, F, max_degree=None):
        return pullback(F, self.omega_inverse, max_degree)


def _require_formal(product):
    if product.mode != "formal":
        raise ValueError("this operation needs a formal-mode PushedStarProduct; numeric mode is verification-only")


def star_pm(F: PolyFunctional, G: PolyFunctional, product: PushedStarProduct, hbar_order: int, max_degree=None) -> HbarSeries:
    """``F *_pm G = ((F o Omega) *_N (G o Omega)) o Omega^{-1}`` order by order in ``hbar``."""
    _require_formal(product)
    D = min(F.max_degree, G.max_degree) if max_degree is None else max_degree
    Fp, Gp = product.pull(F, D), product.pull(G, D)
    s = star_series(HbarSeries([Fp]), HbarSeries([Gp]), hbar_order)
    return HbarSeries([product.push(c, D) for c in _pad(s, hbar_order)])


def star_pm_series(A: HbarSeries, B: HbarSeries, product: PushedStarProduct, hbar_order: int, max_degree) -> HbarSeries:
    """``*_pm`` of two hbar series (used for iterated products)."""
    _require_formal(product)
    Ap = HbarSeries([product.pull(c, max_degree) for c in A.coeffs], A.low)
    Bp = HbarSeries([product.pull(c, max_degree) for c in B.coeffs], B.low)
    s = star_series(Ap, Bp, hbar_order)
    return HbarSeries([product.push(c, max_degree) for c in _pad(s, hbar_order)])


def _pad(s: HbarSeries, hbar_order):
    coeffs = [s[p] for p in range(0, hbar_order + 1)]
    return coeffs


def star_power(F: PolyFunctional, k: int, star="normal", hbar_order=2, product=None, max_degree=None, method="transport"):
    """``(*F)^k`` for the normal product or the transported product.

    ``method='transport'`` computes ``((*_N (F o Omega))^k) o Omega^{-1}``;
    ``method='iterate'`` multiplies left-associated with :func:`star_pm`.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    D = F.max_degree if max_degree is None else max_degree
    if star == "normal":
        return star_power_normal(F.truncate(D) if F.degree > D else F, k, hbar_order)
    if star != "pm":
        raise ValueError("star must be 'normal' or 'pm'")
    _require_formal(product)
    if method == "transport":
        Fp = product.pull(F, D)
        s = star_power_normal(Fp, k, hbar_order)
        return HbarSeries([product.push(c, D) for c in _pad(s, hbar_order)])
    out = HbarSeries([PolyFunctional.constant(F.grid, 1.0, D)])
    base = HbarSeries([F])
    for _ in range(k):
        out = star_pm_series(out, base, product, hbar_order, D)
    return HbarSeries(_pad(out, hbar_order))


def split_residuals(diff: HbarSeries, exact_through_by_order):
    """Per hbar order, max residual on represented degrees and on boundary degrees."""
    out = {}
    for p in diff.powers():
        c = diff[p]
        ex = exact_through_by_order.get(p)
        rep_max, bnd_max = 0.0, 0.0
        for (a, b), v in c.terms.items():
            deg = len(a) + len(b)
            if ex is None or deg <= ex:
                rep_max = max(rep_max, abs(v))
            else:
                bnd_max = max(bnd_max, abs(v))
        out[p] = {"represented": rep_max, "boundary": bnd_max, "exact_through": ex}
    return out


def _formal_exactness(series_list):
    ex = {}
    for s in series_list:
        for p in s.powers():
            e = s[p].exact_through
            if e is None:
                continue
            ex[p] = e if p not in ex else min(ex[p], e)
    return ex


def check_ham_identity(
    H: PolyFunctional,
    H0: PolyFunctional,
    product: PushedStarProduct,
    k: int,
    hbar_order: int,
    max_degree=None,
):
    """Formal check of ``(*_pm H)^k = (*_N H0)^k o Omega^{-1}``.

    The left side is built by iterating :func:`star_pm`; the right side by
    pushing the normal powers of ``H0`` forward.  Returns a report with
    residuals split into represented and boundary degrees per hbar order.
    """
    _require_formal(product)
    if k < 1:
        raise ValueError("k must be >= 1")
    D = H.max_degree if max_degree is None else max_degree
    lhs = star_power(H, k, "pm", hbar_order, product, D, method="iterate")
    rhs_n = star_power_normal(H0.truncate(D), k, hbar_order)
    rhs = HbarSeries([product.push(c, D) for c in _pad(rhs_n, hbar_order)])
    diff = lhs - rhs
    # the identity is only as exact as the linearization itself: H o Omega - H0
    lin = product.pull(H, D) - H0
    ex = _formal_exactness([lhs, rhs])
    split = split_residuals(diff, ex)
    rep = max(v["represented"] for v in split.values())
    return {
        "mode": "formal",
        "k": k,
        "hbar_order": hbar_order,
        "max_degree": D,
        "by_order": {str(p): v for p, v in split.items()},
        "max_represented_residual": rep,
        "linearization_defect_by_degree": {
            str(d): lin.homogeneous(d).max_abs() for d in range(0, D + 1)
        },
    }


def hamiltonian_field(G: PolyFunctional, degree_cap=3) -> FormalSeries:
    """Vector field ``v -> (1/2){v, G}`` of a polynomial functional as a formal series.

    The half is the normalization under which ``H0`` generates the free
    phase rotation ``abar -> e^{i omega t} abar``.
    """
    from .functional_algebra import derivative

    g = G.grid
    N = g.size
    dim = 2 * N
    kappa = 2 * g.omegas / g.weight
    terms = {}
    for c in range(dim):
        slot, i = ("a", c - N) if c >= N else ("abar", c)
        # (1/2){abar_i, G} = i kappa_i dG/da_i ;  (1/2){a_i, G} = -i kappa_i dG/dabar_i
        other = "a" if slot == "abar" else "abar"
        pref = (1j if slot == "abar" else -1j) * kappa[i]
        dG = derivative(G, other, i)
        for (alpha, beta), v in dG.terms.items():
            n = len(alpha) + len(beta)
            if n == 0 or n > degree_cap:
                continue
            t = terms.setdefault(n, np.zeros((dim,) * (n + 1), complex))
            idx = tuple(alpha) + tuple(b + N for b in beta)
            t[(c,) + idx] += pref * v
    # monomial coefficients -> symmetric tensors: divide by the number of orderings
    from itertools import permutations

    out = {}
    for n, t in terms.items():
        sym = np.zeros_like(t)
        it = np.argwhere(t != 0)
        for row in it:
            o, idx = row[0], tuple(row[1:])
            perms = set(permutations(idx))
            for p in perms:
                sym[(o,) + p] += t[(o,) + idx] / len(perms)
        out[n] = sym
    return FormalSeries(dim, out, degree_cap, assume_symmetric=True)


# -- numeric mode --------------------------------------------------------------------------------

class NumericPullbackGradient:
    """Value and holomorphic gradient of ``H o Omega`` for a numerical wave operator.

    The gradient is ``DOmega(psi)^T grad H(Omega psi)`` (plain transpose,
    since all maps are holomorphic in the stacked coordinates), computed by a
    reverse pass through the Strang steps.  Intermediate states are
    recovered by running the steps backward, which is exact up to rounding
    because each kick leaves ``phi`` unchanged.
    """

    def __init__(self, estimate: WaveOperatorEstimate):
        self.est = estimate
        self.grid = estimate.grid
        self.V = estimate.potential
        self.integ = StrangIntegrator(self.grid, self.V, estimate.dt)
        self.ops: FieldOperators = self.integ.ops

    # transposes of the kick linearization
    def _field_T(self, G):
        """Transpose of ``z -> field(z)`` applied to a padded position array."""
        ops, g = self.ops, self.grid
        sm, sp = ops.analyse(G)
        return np.concatenate([ops.rho * sm, ops.rho * sp], axis=-1)

    def _proj_T(self, gz):
        ops, g = self.ops, self.grid
        N = g.size
        c = 1.0 / (2 * np.pi) ** (g.d / 2)
        act = ops.active
        gb, ga = gz[..., :N] * act, gz[..., N:] * act
        return ops.padded_dx**g.d * ops.synth(1j * c * ga, -1j * c * gb)

    def kick_jvp(self, z, dz, tau):
        ops = self.ops
        N = self.grid.size
        phi = ops.field(z[..., :N], z[..., N:])
        dphi = ops.field(dz[..., :N], dz[..., N:])
        ob, oa = ops.project(-self.V.second_derivative(phi) * dphi)
        return dz + tau * np.concatenate([ob, oa], axis=-1)

    def kick_vjp(self, z, gz, tau):
        ops = self.ops
        N = self.grid.size
        phi = ops.field(z[..., :N], z[..., N:])
        return gz + tau * self._field_T(-self.V.second_derivative(phi) * self._proj_T(gz))

    def grad_H(self, z):
        g, ops = self.grid, self.ops
        N = g.size
        gb = g.weight / 2 * z[..., N:]
        ga = g.weight / 2 * z[..., :N]
        out = np.concatenate([gb, ga], axis=-1)
        if not self.V.is_zero:
            phi = ops.field(z[..., :N], z[..., N:])
            out = out + ops.padded_dx**g.d * self._field_T(self.V.derivative(phi))
        return out

    def value_and_grad(self, psi_stacked, func=None):
        """``(F(Omega psi), grad_psi (F o Omega))`` for batched stacked ``psi``.

        ``func(z)`` returns ``(F(z), grad F(z))``; the default is the interacting energy.
        """
        est = self.est
        s = 1.0 if est.direction == "+" else -1.0
        T = est.horizon
        ph = _free_phase_stacked(self.grid, s * T)
        z0 = np.asarray(psi_stacked) * ph
        zT = self.integ.run(z0, -s * T)
        if func is None:
            value, gF = energy(ModeVector.from_stacked(self.grid, zT), self.V, self.ops), self.grad_H(zT)
        else:
            value, gF = func(zT)
        grad = self._reverse(zT, gF, -s * T)
        return value, grad * ph

    def _reverse(self, z_end, g, t_final):
        """Pull ``g`` back through the steps of ``integ.run(., t_final)`` ending at ``z_end``."""
        integ = self.integ
        steps = int(round(abs(t_final) / integ.dt))
        h = np.copysign(integ.dt, t_final)
        drift = _free_phase_stacked(self.grid, h)
        inv_drift = np.conj(drift)
        z = np.array(z_end, dtype=complex, copy=True)
        # forward sequence: K(h/2) [D K(h)]*(steps-1) D K(h/2)
        for s in range(steps, 0, -1):
            tau = h / 2 if s == steps else h
            z = integ.kick(z, -tau)  # state before this kick
            g = self.kick_vjp(z, g, tau)
            z = z * inv_drift
            g = g * drift
        z = integ.kick(z, -h / 2)
        g = self.kick_vjp(z, g, h / 2)
        return g


def stacked_poisson(grid, gF, gG):
    """``{F, G}`` at a point from stacked holomorphic gradients (abar block first)."""
    N = grid.size
    kappa = 2 * grid.omegas / grid.weight
    return (2 / 1j) * np.sum(kappa * (gF[..., N:] * gG[..., :N] - gF[..., :N] * gG[..., N:]), axis=-1)


def _c1(grid, gF, gG):
    """``C_1(F, G) = sum_i (2 omega_i / w) dF/da_i dG/dabar_i`` from stacked gradients."""
    N = grid.size
    kappa = 2 * grid.omegas / grid.weight
    return np.sum(kappa * gF[..., N:] * gG[..., :N], axis=-1)


def check_ham_identity_numeric(V: Potential, horizons, dt, samples: ModeVector, k=2, direction="+"):
    """Pointwise ``(*_pm H)^k(Omega psi)`` vs ``(*_N H0)^k(psi)`` at ``hbar^0`` and ``hbar^1``.

    Uses ``(*_N F)^2 = F^2 + hbar C_1(F, F) + ...``; for ``k = 1`` only the
    ``hbar^0`` order is nonzero.  Residuals are maxima over samples, relative
    to the free side.
    """
    if k not in (1, 2):
        raise ValueError("numeric mode supports k = 1 or 2")
    g = samples.grid
    z = samples.stacked()
    H0 = np.real(energy(samples, Potential()))
    gH0 = np.concatenate([g.weight / 2 * samples.a, g.weight / 2 * samples.abar], axis=-1)
    rows = []
    for T in horizons:
        est = WaveOperatorEstimate(direction, float(T), dt, V, g)
        val, grad = NumericPullbackGradient(est).value_and_grad(z)
        r0 = np.abs(val**k - H0**k) / np.abs(H0**k)
        row = {"T": float(T), "hbar0": float(np.max(r0))}
        if k == 2:
            c_int = _c1(g, grad, grad)
            c_free = _c1(g, gH0, gH0)
            row["hbar1"] = float(np.max(np.abs(c_int - c_free) / np.abs(c_free)))
        rows.append(row)
    return {"mode": "numeric", "k": k, "direction": direction, "rows": rows, "orders_checked": [0] + ([1] if k == 2 else [])}
