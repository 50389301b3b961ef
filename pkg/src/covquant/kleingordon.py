"""Nonlinear Klein-Gordon field on the periodic lattice.

Coordinates are the mode amplitudes ``(abar, a)`` of :mod:`covquant.modes`,
abar block first.  The free Poincare generators act linearly:

* ``P0 = diag(i omega, -i omega)``, ``Pj = diag(-i k_j, +i k_j)``;
* ``Mij = x_i d_j - x_j d_i`` and ``M0j = i omega x_j`` (abar block), built from
  multiplication by the sawtooth coordinate ``x_j`` on the position lattice.

The interaction ``P = -V'(phi)`` is discretized as a Galerkin projection:
``phi`` is synthesized from the non-Nyquist modes (``|z_j| < n/2`` on every
axis), the polynomial is evaluated on a padded grid large enough to be free
of aliasing, and the result is projected back onto the same modes.  Integer
momentum is conserved exactly, so translations commute with the interaction
to rounding, and the potential-energy kick leaves ``phi`` unchanged, making
it the exact flow of ``int V``.  Nyquist modes propagate freely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement

import numpy as np
import scipy.fft as sfft

from .exceptions import BlowUpError, ConfigError, ConvergenceError
from .formal_rep import FormalSeries, NonlinearRep, poincare_basis, poincare_structure_constants
from .functional_algebra import PolyFunctional, free_hamiltonian
from .modes import CauchyData, ModeGrid, ModeVector, decompose, energy_norm, reconstruct

__all__ = [
    "Potential",
    "FieldOperators",
    "FreeGenerators",
    "GeneratorSet",
    "SpectralInteraction",
    "build_free_rep",
    "build_interaction",
    "assemble_rep",
    "free_flow",
    "evolve",
    "evolve_modes",
    "energy",
    "momentum",
    "WaveOperatorEstimate",
    "wave_operator",
    "scattering_operator",
    "check_linearization",
    "SpectralGenerator",
    "spectral_images",
    "probe_residual",
    "interaction_tensor",
    "boost_charge",
    "StrangIntegrator",
    "drift_study",
]


# -- potential ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """``V(s) = sum_{j>=3} c_j s^j / j`` so that ``V'(s) = sum c_j s^{j-1}``.

    Parameters
    ----------
    coeffs : dict
        ``{power j: c_j}`` with ``j >= 3``.
    """

    coeffs: tuple = ()

    def __init__(self, coeffs=None):
        items = {}
        if coeffs is None:
            coeffs = {}
        if not isinstance(coeffs, dict):
            coeffs = {3 + i: c for i, c in enumerate(coeffs)}
        for j, c in coeffs.items():
            j, c = int(j), float(c)
            if not np.isfinite(c):
                raise ConfigError(field="potential", message=f"coefficient c_{j} is not finite")
            if j < 3 and c != 0:
                raise ConfigError(
                    field="potential",
                    message=f"coefficient c_{j} = {c} violates V(0)=V′(0)=V″(0)=0 (only powers j >= 3 are allowed)",
                )
            if c != 0:
                items[j] = c
        object.__setattr__(self, "coeffs", tuple(sorted(items.items())))

    @classmethod
    def phi4(cls, g):
        return cls({4: g})

    @classmethod
    def from_config(cls, cfg):
        """Accepts ``{"coeffs": [c3, c4, ...]}``, ``{"coeffs": {"4": g}}`` or a bare list/dict."""
        if isinstance(cfg, dict) and "coeffs" in cfg:
            cfg = cfg["coeffs"]
        if isinstance(cfg, dict):
            return cls({int(k): v for k, v in cfg.items()})
        if isinstance(cfg, (list, tuple)):
            return cls(list(cfg))
        raise ConfigError(field="potential", message="expected a coefficient list or a power->coefficient mapping")

    def to_config(self):
        return {"coeffs": {str(j): c for j, c in self.coeffs}}

    @property
    def is_zero(self):
        return not self.coeffs

    @property
    def degree(self):
        """Polynomial degree ``K`` of ``V`` (0 for ``V = 0``)."""
        return max((j for j, _ in self.coeffs), default=0)

    def __call__(self, s):
        s = np.asarray(s)
        out = np.zeros_like(s, dtype=np.result_type(s, float))
        for j, c in self.coeffs:
            out = out + c * s**j / j
        return out

    def derivative(self, s):
        s = np.asarray(s)
        out = np.zeros_like(s, dtype=np.result_type(s, float))
        for j, c in self.coeffs:
            out = out + c * s ** (j - 1)
        return out

    def second_derivative(self, s):
        s = np.asarray(s)
        out = np.zeros_like(s, dtype=np.result_type(s, float))
        for j, c in self.coeffs:
            out = out + c * (j - 1) * s ** (j - 2)
        return out

    def certify_positive(self, mass, s_max=None, samples=2001):
        """Check that ``V(s) + m^2 s^2 / 2 >= 0``; raise :class:`ConfigError` otherwise.

        A nonzero potential needs an even leading power with positive
        coefficient, and the sampled bound must hold on ``[-s_max, s_max]``.
        """
        if self.is_zero:
            return True
        K, cK = self.coeffs[-1]
        if K % 2 or cK <= 0:
            raise ConfigError(
                field="potential",
                message=f"positivity certificate fails: leading term c_{K} s^{K}/{K} must have even K and c_K > 0",
            )
        if s_max is None:
            s_max = 10.0 * max(1.0, max(abs(c) for _, c in self.coeffs) / cK)
        s = np.linspace(-s_max, s_max, samples)
        val = self(s) + 0.5 * mass**2 * s**2
        if val.min() < -1e-12:
            raise ConfigError(
                field="potential", message=f"positivity certificate fails: V + m^2 s^2/2 = {val.min():.3e} < 0"
            )
        return True


# -- lattice operators ----------------------------------------------------------------------

class FieldOperators:
    """Lattice operators shared by the free and interacting generators of one grid."""

    def __init__(self, grid: ModeGrid, degree=4):
        self.grid = grid
        self.degree = max(int(degree), 2)

    @cached_property
    def active(self):
        """Modes coupled by the interaction: no component on the Nyquist frequency."""
        return np.all(self.grid.z != -self.grid.n_per_axis // 2, axis=1)

    @cached_property
    def padded_n(self):
        n = self.grid.n_per_axis
        target = self.degree * n // 2 + 1
        m = sfft.next_fast_len(target)
        while m % 2:
            m = sfft.next_fast_len(m + 1)
        return m

    @cached_property
    def rho(self):
        """Coefficient ``w / (2 (2pi)^{d/2} omega)`` of each mode in ``phi``, zero for Nyquist modes."""
        g = self.grid
        return np.where(self.active, g.weight * g.phi_factor, 0.0)

    @cached_property
    def _bins(self):
        g, M = self.grid, self.padded_n
        shape = (M,) * g.d
        plus = np.ravel_multi_index(tuple((g.z % M).T), shape)
        minus = np.ravel_multi_index(tuple((-g.z % M).T), shape)
        return plus, minus

    @cached_property
    def _padded_parity(self):
        M, d = self.padded_n, self.grid.d
        q = np.fft.fftfreq(M, 1.0 / M).round().astype(int)
        mesh = np.meshgrid(*([q] * d), indexing="ij")
        s = sum(mesh)
        return np.where(s % 2 == 0, 1.0, -1.0).ravel()

    @property
    def padded_dx(self):
        return self.grid.box_length / self.padded_n

    @cached_property
    def padded_positions(self):
        M, g = self.padded_n, self.grid
        axis = -g.box_length / 2 + self.padded_dx * np.arange(M)
        mesh = np.meshgrid(*([axis] * g.d), indexing="ij")
        return np.stack([m for m in mesh], axis=0)

    def synth(self, cm, cp):
        """``sum_i (cm_i e^{-i k_i x} + cp_i e^{i k_i x})`` over active modes on the padded grid."""
        g, M = self.grid, self.padded_n
        lead = np.broadcast_shapes(np.shape(cm)[:-1], np.shape(cp)[:-1])
        F = np.zeros(lead + (M**g.d,), complex)
        plus, minus = self._bins
        F[..., plus] += np.where(self.active, cp, 0.0)
        F[..., minus] += np.where(self.active, cm, 0.0)
        F = (F * self._padded_parity).reshape(lead + (M,) * g.d)
        return sfft.ifftn(F, axes=tuple(range(-g.d, 0))) * (M**g.d)

    def analyse(self, G):
        """Raw sums ``(sum_x G e^{-i k_i x}, sum_x G e^{i k_i x})`` over the padded grid, active modes only."""
        g, M = self.grid, self.padded_n
        lead = np.shape(G)[: np.ndim(G) - g.d]
        Gh = sfft.fftn(G, axes=tuple(range(-g.d, 0))).reshape(lead + (M**g.d,)) * self._padded_parity
        plus, minus = self._bins
        return np.where(self.active, Gh[..., plus], 0.0), np.where(self.active, Gh[..., minus], 0.0)

    def field(self, abar, a):
        """Coupled field ``phi`` on the padded grid (complex for complexified amplitudes)."""
        return self.synth(self.rho * abar, self.rho * a)

    def project(self, P):
        """Mode components ``(-i Phat(-k), i Phat(k)) / (2pi)^{d/2}`` of a padded position array."""
        g = self.grid
        sm, sp = self.analyse(P)
        c = self.padded_dx**g.d / (2 * np.pi) ** (g.d / 2)
        return -1j * c * sp, 1j * c * sm

    def integrate(self, f):
        """Exact integral over the box of a padded position array (band-limited integrand)."""
        return np.sum(f, axis=tuple(range(-self.grid.d, 0))) * self.padded_dx**self.grid.d

    # position operator ----------------------------------------------------------------
    @cached_property
    def position_matrices(self):
        """``X[j]`` acting on abar coordinates: ``(1/N) sum_x e^{i k_i x} x_j e^{-i k_i' x}``."""
        g = self.grid
        E = np.exp(-1j * g.positions @ g.momenta.T)  # (sites, modes)
        return [(E.conj().T * g.positions[:, j]) @ E / g.size for j in range(g.d)]

    def position_block(self, j):
        X = self.position_matrices[j]
        N = self.grid.size
        out = np.zeros((2 * N, 2 * N), complex)
        out[:N, :N] = X
        out[N:, N:] = X.conj()
        return out


# -- free generators ------------------------------------------------------------------------

@dataclass
class FreeGenerators:
    """Linear generators ``T1_X`` and their quadratic Hamiltonian functionals."""

    grid: ModeGrid
    matrices: dict
    functionals: dict
    hamiltonian_defect: dict
    basis: list

    def series(self, degree_cap=3):
        return {k: FormalSeries.linear(m, degree_cap) for k, m in self.matrices.items()}


def _hamiltonian_from_matrix(grid, A, max_degree):
    """Quadratic functional ``abar^T Q a`` whose half-bracket flow is ``v -> A v`` when ``A`` is compatible."""
    N = grid.size
    Aa = A[N:, N:]
    Q = 1j * (grid.weight / (2 * grid.omegas))[:, None] * Aa
    D = 2 * grid.omegas / grid.weight
    expected_abar = -(D[:, None] * Aa.T) / D[None, :]
    defect = float(np.abs(A[:N, :N] - expected_abar).max(initial=0.0))
    defect = max(defect, float(np.abs(A[:N, N:]).max(initial=0.0)), float(np.abs(A[N:, :N]).max(initial=0.0)))
    F = PolyFunctional.from_quadratic(grid, Q, max_degree=max_degree)
    return F, defect


def build_free_rep(grid: ModeGrid, max_degree=12) -> FreeGenerators:
    """Free Poincare generators on ``grid`` (matrices, linear series and quadratic functionals)."""
    g = grid
    N = g.size
    ops = FieldOperators(g)
    om, k = g.omegas, g.momenta

    def block(ab, aa):
        out = np.zeros((2 * N, 2 * N), complex)
        out[:N, :N] = ab
        out[N:, N:] = aa
        return out

    mats = {"P0": block(np.diag(1j * om), np.diag(-1j * om))}
    for j in range(1, g.d + 1):
        mats[f"P{j}"] = block(np.diag(-1j * k[:, j - 1]), np.diag(1j * k[:, j - 1]))
    X = ops.position_matrices
    for i in range(1, g.d + 1):
        for j in range(i + 1, g.d + 1):
            Xi, Xj = X[i - 1], X[j - 1]
            ab = Xi @ np.diag(-1j * k[:, j - 1]) - Xj @ np.diag(-1j * k[:, i - 1])
            aa = Xi.conj() @ np.diag(1j * k[:, j - 1]) - Xj.conj() @ np.diag(1j * k[:, i - 1])
            mats[f"M{i}{j}"] = block(ab, aa)
    for j in range(1, g.d + 1):
        Xj = X[j - 1]
        mats[f"M0{j}"] = block(1j * om[:, None] * Xj, -1j * om[:, None] * Xj.conj())
    funcs, defects = {}, {}
    for label, A in mats.items():
        funcs[label], defects[label] = _hamiltonian_from_matrix(g, A, max_degree)
    return FreeGenerators(g, mats, funcs, defects, poincare_basis(g.d))


# -- interaction ----------------------------------------------------------------------------

class SpectralInteraction:
    """Matrix-free evaluation of the interaction ``T~_{P0}`` and ``T~_{M0j}`` through FFTs.

    ``multilinear(p, args)`` evaluates the symmetric ``p``-linear part on
    stacked coordinate vectors of shape ``(..., 2N)``.
    """

    def __init__(self, grid: ModeGrid, V: Potential, ops: FieldOperators | None = None):
        self.grid = grid
        self.V = V
        self.ops = ops or FieldOperators(grid, V.degree)
        if self.ops.degree < V.degree:
            raise ValueError("padded grid too small for this potential")

    @property
    def degrees(self):
        return [j - 1 for j, _ in self.V.coeffs]

    def _split(self, v):
        N = self.grid.size
        v = np.asarray(v)
        return v[..., :N], v[..., N:]

    def multilinear(self, p, args, boost_axis=None):
        coeff = dict(self.V.coeffs).get(p + 1, 0.0)
        lead = np.broadcast_shapes(*(np.shape(x)[:-1] for x in args))
        if coeff == 0:
            return np.zeros(lead + (2 * self.grid.size,), complex)
        prod = None
        for x in args:
            f = self.ops.field(*self._split(x))
            prod = f if prod is None else prod * f
        return self._finish(-coeff * prod, boost_axis)

    def __call__(self, v, boost_axis=None):
        """Full interaction ``T~(v)`` (``boost_axis=j`` gives ``T~_{M0j}``)."""
        phi = self.ops.field(*self._split(v))
        return self._finish(-self.V.derivative(phi), boost_axis)

    def _finish(self, P, boost_axis):
        ob, oa = self.ops.project(P)
        out = np.concatenate([ob, oa], axis=-1)
        if boost_axis is not None:
            X = self.ops.position_matrices[boost_axis - 1]
            N = self.grid.size
            out = np.concatenate([out[..., :N] @ X.T, out[..., N:] @ X.conj().T], axis=-1)
        return out

    def potential_energy(self, v):
        phi = self.ops.field(*self._split(v))
        return self.ops.integrate(self.V(phi))


class SpectralGenerator:
    """Matrix-free image ``T_X = T1_X + T~_X`` exposing ``terms``/``multilinear`` like a FormalSeries."""

    def __init__(self, matrix, spectral: SpectralInteraction | None = None, boost_axis=None, degree_cap=3):
        self.matrix = np.asarray(matrix)
        self.dim = self.matrix.shape[0]
        self.spectral = spectral
        self.boost_axis = boost_axis
        self.degree_cap = degree_cap
        self.terms = {1: self.matrix}
        if spectral is not None:
            for p in spectral.degrees:
                if p <= degree_cap:
                    self.terms[p] = None

    def multilinear(self, n, args):
        if n not in self.terms:
            lead = np.broadcast_shapes(*(np.shape(x)[:-1] for x in args))
            return np.zeros(lead + (self.dim,), complex)
        if n == 1:
            return np.asarray(args[0]) @ self.matrix.T
        return self.spectral.multilinear(n, args, boost_axis=self.boost_axis)

    def homogeneous(self, n, x):
        return self.multilinear(n, [x] * n)


def spectral_images(grid: ModeGrid, V: Potential, degree_cap=3):
    """Matrix-free generator images for large grids (no dense tensors)."""
    free = build_free_rep(grid)
    spectral = SpectralInteraction(grid, V)
    out = {}
    for label, m in free.matrices.items():
        if label == "P0":
            out[label] = SpectralGenerator(m, spectral, None, degree_cap)
        elif label.startswith("M0"):
            out[label] = SpectralGenerator(m, spectral, int(label[2]), degree_cap)
        else:
            out[label] = SpectralGenerator(m, None, None, degree_cap)
    return out


def probe_residual(images, structure_constants, X, Y, psi, n):
    """Degree-``n`` closure defect ``[T_X, T_Y]^n - sum c T_Z^n`` at the probe ``psi``, stacked coordinates."""
    from .formal_rep import probe_bracket

    r = probe_bracket(images[X], images[Y], psi, n)
    for Z, c in structure_constants.get((X, Y), {}).items():
        r = r - c * images[Z].homogeneous(n, psi)
    return r


def interaction_tensor(ops: FieldOperators, V: Potential, p: int):
    """Dense ``T~_{P0}`` degree-``p`` tensor from integer momentum conservation.

    Entry ``[o; i_1..i_p] = s_o (2pi)^{-d/2} (-c_{p+1}) L^d prod rho(i) * [sum mom(i) == mom(o)]``
    with ``s = -i`` on abar outputs and ``+i`` on a outputs; abar_i carries
    momentum ``-z_i`` and a_i carries ``+z_i``.
    """
    g = ops.grid
    coeff = dict(V.coeffs).get(p + 1, 0.0)
    N = g.size
    dim = 2 * N
    if coeff == 0:
        return np.zeros((dim,) * (p + 1), complex)
    mom = np.concatenate([-g.z, g.z], axis=0)
    base = p * g.n_per_axis + 1
    key = np.zeros(dim, dtype=np.int64)
    for ax in range(g.d):
        key = key * (2 * base + 1) + (mom[:, ax] + base)
    # keys are additive after removing the offsets
    off = 0
    for _ in range(g.d):
        off = off * (2 * base + 1) + base
    key0 = key - off
    rho = np.concatenate([ops.rho, ops.rho])
    act = np.concatenate([ops.active, ops.active])
    sign = np.concatenate([np.full(N, -1j), np.full(N, 1j)]) * np.where(act, 1.0, 0.0)
    total = np.zeros((dim,) * p, dtype=np.int64)
    weight = np.ones((dim,) * p)
    for s in range(p):
        shape = [1] * p
        shape[s] = dim
        total = total + key0.reshape(shape)
        weight = weight * rho.reshape(shape)
    pref = -coeff * g.box_length**g.d / (2 * np.pi) ** (g.d / 2)
    T = (key0.reshape((dim,) + (1,) * p) == total[None]) * weight[None] * pref
    return T * sign.reshape((dim,) + (1,) * p)


@dataclass
class GeneratorSet:
    """Free and interacting generators of one grid and potential."""

    grid: ModeGrid
    potential: Potential
    free: FreeGenerators
    series: dict
    functionals: dict
    degree_cap: int
    ops: FieldOperators
    spectral: SpectralInteraction

    def rep(self, free_only=False):
        images = self.free.series(self.degree_cap) if free_only else self.series
        return NonlinearRep(
            poincare_basis(self.grid.d),
            images,
            poincare_structure_constants(self.grid.d),
            {"mass": self.grid.mass},
        )


def _potential_functional(ops: FieldOperators, V: Potential, max_degree, weight_fn=None):
    """``int V(phi)`` (or ``int x_j V(phi)`` via ``weight_fn``) as a polynomial in the active modes."""
    g = ops.grid
    N = g.size
    coords = [i for i in range(N) if ops.active[i]]
    coords = [(0, i) for i in coords] + [(1, i) for i in coords]  # (0, i) = abar_i, (1, i) = a_i
    terms = {}
    for j, c in V.coeffs:
        if j > max_degree:
            continue
        for combo in combinations_with_replacement(coords, j):
            q = np.zeros(g.d, dtype=int)
            for slot, i in combo:
                q += g.z[i] if slot else -g.z[i]
            if weight_fn is None:
                if np.any(q):
                    continue
                amp = g.box_length**g.d
            else:
                amp = weight_fn(q)
                if amp == 0:
                    continue
            counts = {}
            for item in combo:
                counts[item] = counts.get(item, 0) + 1
            mult = math.factorial(j)
            for m in counts.values():
                mult //= math.factorial(m)
            val = c / j * amp * mult * float(np.prod([ops.rho[i] for _, i in combo]))
            alpha = tuple(i for s, i in combo if s == 0)
            beta = tuple(i for s, i in combo if s == 1)
            terms[(alpha, beta)] = terms.get((alpha, beta), 0j) + val
    return PolyFunctional(g, terms, max_degree)


def build_interaction(grid: ModeGrid, V: Potential, degree_cap=3, max_degree=None, functionals=True) -> GeneratorSet:
    """Interacting generators: ``T = T1 + T~`` with ``T~_{P0}``, ``T~_{M0j}`` nonzero.

    ``degree_cap`` bounds the formal series; it must reach the degree of ``V'``.
    Hamiltonian functionals (``H = H0 + int V``, ``K_j`` with ``int x_j V``)
    are built when ``functionals`` is set.
    """
    if not V.is_zero and degree_cap < V.degree - 1:
        raise ValueError(f"degree_cap {degree_cap} is below the degree {V.degree - 1} of V'")
    max_degree = max(V.degree, 2) if max_degree is None else max_degree
    ops = FieldOperators(grid, max(V.degree, 2))
    free = build_free_rep(grid, max_degree=max_degree)
    series = free.series(degree_cap)
    spectral = SpectralInteraction(grid, V, ops)
    N = grid.size
    for p in sorted({j - 1 for j, _ in V.coeffs}):
        T = interaction_tensor(ops, V, p)
        series["P0"].terms[p] = T
        for j in range(1, grid.d + 1):
            Xb = ops.position_block(j - 1)
            series[f"M0{j}"].terms[p] = np.tensordot(Xb, T, axes=([1], [0]))
    funcs = dict(free.functionals)
    if functionals and not V.is_zero:
        funcs["P0"] = free.functionals["P0"] + _potential_functional(ops, V, max_degree)
        chis = _position_fourier(ops)
        for j in range(1, grid.d + 1):
            chi = chis[j - 1]
            M = ops.padded_n

            def wfn(q, chi=chi, M=M):
                return grid.box_length**grid.d * chi[tuple(np.asarray(q) % M)]

            funcs[f"M0{j}"] = free.functionals[f"M0{j}"] + _potential_functional(ops, V, max_degree, wfn)
    return GeneratorSet(grid, V, free, series, funcs, degree_cap, ops, spectral)


def _position_fourier(ops):
    """``chi_j(q) = (1/M^d) sum_x x_j e^{i q x}`` on the padded grid, indexed by ``q mod M``."""
    g, M = ops.grid, ops.padded_n
    out = []
    for j in range(g.d):
        xj = ops.padded_positions[j]
        q = np.fft.fftfreq(M, 1.0 / M).round().astype(int)
        mesh = np.meshgrid(*([q] * g.d), indexing="ij")
        parity = np.where(sum(mesh) % 2 == 0, 1.0, -1.0)
        # sum_x x e^{i q (-L/2 + n dx)} = (-1)^q * M^d * ifft(x)[q]
        out.append(sfft.ifftn(xj) * parity)
    return out


def assemble_rep(grid: ModeGrid, V: Potential, degree_cap=3) -> NonlinearRep:
    return build_interaction(grid, V, degree_cap, functionals=False).rep()


# -- flows -------------------------------------------------------------------------------------

def free_flow(v: ModeVector, t) -> ModeVector:
    """Exact free evolution: ``abar * e^{i omega t}``, ``a * e^{-i omega t}``."""
    ph = np.exp(1j * v.grid.omegas * t)
    return ModeVector(v.grid, v.abar * ph, v.a * np.conj(ph))


def _free_phase_stacked(grid, t):
    ph = np.exp(1j * grid.omegas * t)
    return np.concatenate([ph, np.conj(ph)])


def energy(v: ModeVector, V: Potential, ops: FieldOperators | None = None):
    """``H = H0 + int V(phi)``, the integral exact on the padded grid."""
    g = v.grid
    h0 = np.sum(g.weight / 2 * v.abar * v.a, axis=-1)
    if V.is_zero:
        return h0.real if np.isrealobj(h0) else h0
    ops = ops or FieldOperators(g, V.degree)
    phi = ops.field(v.abar, v.a)
    return h0 + ops.integrate(V(phi))


def momentum(v: ModeVector):
    """Free momentum ``P_j = -sum (w/2)(k_j/omega) abar a`` for every axis, shape ``(..., d)``."""
    g = v.grid
    dens = g.weight / 2 * v.abar * v.a / g.omegas
    return -np.tensordot(dens, g.momenta, axes=([-1], [0]))


def boost_charge(v: ModeVector, V: Potential, j, ops: FieldOperators | None = None, free=None):
    """``K_j = (w/2) abar^T X a + int x_j V(phi)`` (the boost functional at ``t = 0``)."""
    g = v.grid
    ops = ops or FieldOperators(g, max(V.degree, 2))
    X = ops.position_matrices[j - 1]
    kf = g.weight / 2 * np.einsum("...i,ij,...j->...", v.abar, X.conj(), v.a)
    if V.is_zero:
        return kf
    phi = ops.field(v.abar, v.a)
    return kf + ops.integrate(ops.padded_positions[j - 1] * V(phi))


class StrangIntegrator:
    """Kick-drift-kick splitting in mode space, batched over leading axes.

    The kick is the exact flow of ``int V`` (``phi`` is unchanged by it); the
    drift is the exact free flow.
    """

    def __init__(self, grid: ModeGrid, V: Potential, dt: float, ops: FieldOperators | None = None):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if dt * grid.omegas.max() >= np.pi:
            raise ValueError(f"dt * max(omega) = {dt * grid.omegas.max():.3f} >= pi")
        self.grid, self.V, self.dt = grid, V, float(dt)
        self.ops = ops or FieldOperators(grid, max(V.degree, 2))
        self.spectral = SpectralInteraction(grid, V, self.ops)

    def kick(self, z, tau):
        if self.V.is_zero or tau == 0:
            return z
        return z + tau * self.spectral(z)

    def run(self, z, t_final, check_every=50, callback=None, every=1, t0=0.0):
        """Integrate stacked coordinates ``z`` over ``t_final`` (negative for backward)."""
        steps = int(round(abs(t_final) / self.dt))
        if steps == 0:
            return z
        if abs(steps * self.dt - abs(t_final)) > 1e-9 * max(1.0, abs(t_final)):
            raise ValueError(f"|t_final|/dt must be an integer (got {abs(t_final) / self.dt})")
        h = math.copysign(self.dt, t_final)
        z = np.array(z, dtype=complex, copy=True)
        with np.errstate(over="ignore", invalid="ignore"):
            return self._steps(z, steps, h, check_every, callback, every, t0)

    def _steps(self, z, steps, h, check_every, callback, every, t0):
        drift = _free_phase_stacked(self.grid, h)
        z = self.kick(z, h / 2)
        for s in range(steps):
            z = z * drift
            last = s == steps - 1
            z = self.kick(z, h / 2 if last else h)
            if (s + 1) % check_every == 0 or last:
                if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e150:
                    raise BlowUpError(f"blow-up suspected at t = {t0 + (s + 1) * h:.4g}: non-finite amplitudes", time=t0 + (s + 1) * h)
            if callback is not None and ((s + 1) % every == 0 or last):
                # undo half of the merged kick so the callback sees a synchronized state
                callback(t0 + (s + 1) * h, z if last else self.kick(z, -h / 2))
        return z


def evolve_modes(v: ModeVector, V: Potential, t_final, dt, callback=None, every=1, ops=None) -> ModeVector:
    integ = StrangIntegrator(v.grid, V, dt, ops)
    z = integ.run(v.stacked(), t_final, callback=callback, every=every)
    return ModeVector.from_stacked(v.grid, z)


def evolve(data: CauchyData, V: Potential, t_final, dt, callback=None, every=1) -> CauchyData:
    """Interacting evolution of real Cauchy data by Strang splitting."""
    v = evolve_modes(decompose(data), V, t_final, dt, callback=callback, every=every)
    return reconstruct(v, real=True, atol=1e-8)


# -- wave and scattering operators --------------------------------------------------------------

@dataclass
class WaveOperatorEstimate:
    """Numerical ``Omega_+ = U_{-T} U1_T`` (``direction='+'``) or ``Omega_- = U_T U1_{-T}``."""

    direction: str
    horizon: float
    dt: float
    potential: Potential
    grid: ModeGrid
    rho: float = 0.1
    convergence_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in ("+", "-"):
            raise ValueError("direction must be '+' or '-'")

    @property
    def steps(self):
        return int(round(self.horizon / self.dt))

    def _sign(self):
        return 1.0 if self.direction == "+" else -1.0

    def apply_stacked(self, z, horizon=None):
        T = self.horizon if horizon is None else horizon
        s = self._sign()
        z = np.asarray(z) * _free_phase_stacked(self.grid, s * T)
        return StrangIntegrator(self.grid, self.potential, self.dt).run(z, -s * T)

    def inverse_stacked(self, z, horizon=None):
        """``Omega^{-1} = U1_{-sT} U_{sT}``."""
        T = self.horizon if horizon is None else horizon
        s = self._sign()
        z = StrangIntegrator(self.grid, self.potential, self.dt).run(np.asarray(z), s * T)
        return z * _free_phase_stacked(self.grid, -s * T)

    def __call__(self, v: ModeVector) -> ModeVector:
        return ModeVector.from_stacked(v.grid, self.apply_stacked(v.stacked()))

    def inverse(self, v: ModeVector) -> ModeVector:
        return ModeVector.from_stacked(v.grid, self.inverse_stacked(v.stacked()))

    def drift(self, v: ModeVector, horizon=None):
        """``||Omega^{(T)} v - Omega^{(T/2)} v||_E``; appended to the convergence log."""
        T = self.horizon if horizon is None else horizon
        z = v.stacked()
        full = self.apply_stacked(z, T)
        half = self.apply_stacked(z, T / 2)
        d = energy_norm(ModeVector.from_stacked(self.grid, full - half))
        self.convergence_log.append((T, float(np.max(d))))
        return d


def wave_operator(direction, V: Potential, horizon_T, dt, v_free: ModeVector, rho=None, record_drift=True):
    """Apply the numerical wave operator to free data; returns ``(Omega v, estimate)``.

    ``rho`` bounds the sup norms of the Cauchy data of ``v_free`` (small-data ball).
    """
    if rho is not None:
        data = reconstruct(v_free, real=True, atol=1e-8)
        amp = max(np.abs(data.phi).max(), np.abs(data.pi).max())
        if amp > rho:
            raise ValueError(f"data outside the small-data ball: sup norm {amp:.3e} > rho = {rho}")
    est = WaveOperatorEstimate(direction, float(horizon_T), float(dt), V, v_free.grid, rho or 0.1)
    out = est(v_free)
    if record_drift:
        est.drift(v_free)
    return out, est


def drift_study(V, horizons, dt, v_free: ModeVector, direction="+"):
    """Drifts ``||Omega^{(T)} - Omega^{(T/2)}||_E`` for each ``T``; halves are shared when possible.

    Returns ``(drifts, images)`` where ``images[T]`` is ``Omega^{(T)} v``.
    """
    horizons = sorted(float(T) for T in horizons)
    needed = sorted(set(horizons) | {T / 2 for T in horizons})
    est = WaveOperatorEstimate(direction, horizons[-1], dt, V, v_free.grid)
    z = v_free.stacked()
    images = {T: est.apply_stacked(z, T) for T in needed}
    drifts = {}
    for T in horizons:
        d = energy_norm(ModeVector.from_stacked(v_free.grid, images[T] - images[T / 2]))
        drifts[T] = d
        est.convergence_log.append((T, float(np.max(d))))
    return drifts, images, est


def scattering_operator(V: Potential, horizon_T, dt, v: ModeVector) -> ModeVector:
    """``S = (Omega_+)^{-1} Omega_- ~ U1_{-T} U_{2T} U1_{-T}``."""
    g = v.grid
    z = v.stacked() * _free_phase_stacked(g, -horizon_T)
    z = StrangIntegrator(g, V, dt).run(z, 2 * horizon_T)
    return ModeVector.from_stacked(g, z * _free_phase_stacked(g, -horizon_T))


def check_linearization(V: Potential, horizons, dt, samples, direction="+", boosts=True):
    """Residuals ``|G(Omega psi) - G_f(psi)|`` for ``H``, ``P_j`` and (optionally) ``K_j`` per horizon.

    ``samples`` is a batched :class:`ModeVector`.  Returns a dict with, per
    generator, the max residual over samples for each horizon and the relative
    residual normalized by ``|G_f(psi)|`` (``H`` only).
    """
    g = samples.grid
    ops = FieldOperators(g, max(V.degree, 2))
    free0 = Potential()
    H_f = np.real(energy(samples, free0))
    P_f = momentum(samples)
    K_f = [boost_charge(samples, free0, j, ops) for j in range(1, g.d + 1)] if boosts else []
    out = {"horizons": [float(T) for T in horizons], "H": [], "H_relative": [], "P": [], "K": []}
    for T in horizons:
        est = WaveOperatorEstimate(direction, float(T), dt, V, g)
        w = ModeVector.from_stacked(g, est.apply_stacked(samples.stacked()))
        H = energy(w, V, ops)
        rH = np.abs(H - H_f)
        out["H"].append(float(np.max(rH)))
        out["H_relative"].append(float(np.max(rH / np.abs(H_f))))
        out["P"].append(float(np.max(np.abs(momentum(w) - P_f))))
        if boosts:
            out["K"].append(
                float(max(np.max(np.abs(boost_charge(w, V, j, ops) - K_f[j - 1])) for j in range(1, g.d + 1)))
            )
    return out
