"""Truncated phase space of a real scalar field on a periodic box.

Momenta live on the symmetric window ``k = (2*pi/L) * z`` with integer
``z in {-n/2, ..., n/2 - 1}^d``.  Integrals over momentum become sums with
weight ``w = (2*pi/L)**d`` and ``delta(k - k')`` becomes ``delta_{ii'} / w``,
so the continuum mode formulas hold verbatim with sums in place of integrals.

Mode amplitudes are stored flat, in FFT order (index ``i`` runs over the
C-ordered multi-index of ``numpy.fft.fftn``).  Position samples sit at
``x_j = -L/2 + j * L/n`` on each axis, i.e. the sawtooth coordinate of the
fundamental domain ``[-L/2, L/2)``.

The field expansion is::

    phi(x) = sum_i w/(2 (2pi)^{d/2} omega_i) (abar_i e^{-i k_i x} + a_i e^{i k_i x})
    pi(x)  = i sum_i w/(2 (2pi)^{d/2})       (abar_i e^{-i k_i x} - a_i e^{i k_i x})

with this choice ``H0 = sum_i (w/2) abar_i a_i`` is the lattice free energy and
the free flow is ``abar -> e^{i omega t} abar``, ``a -> e^{-i omega t} a``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import GridMismatchError, RealityError

__all__ = [
    "ModeGrid",
    "ModeVector",
    "CauchyData",
    "PMVector",
    "decompose",
    "reconstruct",
    "to_pm",
    "from_pm",
    "energy_norm",
    "gaussian_cauchy",
    "dump_field",
    "load_field",
]


@dataclass(frozen=True)
class ModeGrid:
    """Uniform periodic momentum/position grid with Klein-Gordon dispersion.

    Parameters
    ----------
    d : int
        Spatial dimension (1, 2 or 3).
    n_per_axis : int
        Points per axis, even.
    box_length : float
        Side length ``L`` of the periodic box.
    mass : float
        Mass ``m > 0``.
    """

    d: int
    n_per_axis: int
    box_length: float
    mass: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if self.n_per_axis < 2 or self.n_per_axis % 2:
            raise ValueError(f"n_per_axis must be an even integer >= 2, got {self.n_per_axis}")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")
        if not self.mass > 0:
            raise ValueError("mass must be positive (massive case only)")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            d=int(cfg["d"]),
            n_per_axis=int(cfg["n_per_axis"]),
            box_length=float(cfg["box_length"]),
            mass=float(cfg["mass"]),
        )

    def to_config(self):
        return {
            "d": self.d,
            "n_per_axis": self.n_per_axis,
            "box_length": self.box_length,
            "mass": self.mass,
        }

    @cached_property
    def grid_hash(self):
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def shape(self):
        return (self.n_per_axis,) * self.d

    @property
    def size(self):
        """Total mode count ``N = n**d``."""
        return self.n_per_axis**self.d

    @property
    def weight(self):
        """Quadrature weight ``w = (2 pi / L)**d`` standing in for ``d^d k``."""
        return (2 * np.pi / self.box_length) ** self.d

    @property
    def dx(self):
        return self.box_length / self.n_per_axis

    @cached_property
    def z(self):
        """Integer momentum labels, shape ``(N, d)``, FFT order."""
        axis = np.fft.fftfreq(self.n_per_axis, 1.0 / self.n_per_axis).round().astype(int)
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def momenta(self):
        return (2 * np.pi / self.box_length) * self.z.astype(float)

    @cached_property
    def omegas(self):
        return np.sqrt(np.sum(self.momenta**2, axis=-1) + self.mass**2)

    @cached_property
    def positions(self):
        """Sawtooth lattice coordinates, shape ``(N, d)`` in C order of the position array."""
        axis = -self.box_length / 2 + self.dx * np.arange(self.n_per_axis)
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def reflection(self):
        """Index of the mode at ``-k`` (modulo the lattice), for every mode."""
        n = self.n_per_axis
        zr = (-self.z) % n
        return np.ravel_multi_index(tuple(zr.T), self.shape)

    @cached_property
    def _parity(self):
        # e^{i k . L/2} = (-1)^{sum z}: phase from the -L/2 origin of the position lattice
        return np.where(self.z.sum(axis=-1) % 2 == 0, 1.0, -1.0)

    # -- lattice Fourier helpers -------------------------------------------------
    def forward(self, f):
        """``hat f_i = dx^d sum_x f(x) e^{-i k_i x}`` for position arrays of shape ``(..., *shape)``."""
        f = np.asarray(f)
        axes = tuple(range(-self.d, 0))
        out = np.fft.fftn(f, axes=axes).reshape(f.shape[: f.ndim - self.d] + (self.size,))
        return out * (self.dx**self.d) * self._parity

    def synth_plus(self, coeffs):
        """``sum_i c_i e^{+i k_i x}`` on the position lattice."""
        c = np.asarray(coeffs) * self._parity
        lead = c.shape[:-1]
        arr = c.reshape(lead + self.shape)
        axes = tuple(range(-self.d, 0))
        return np.fft.ifftn(arr, axes=axes) * self.size

    def synth_minus(self, coeffs):
        """``sum_i c_i e^{-i k_i x}`` on the position lattice."""
        c = np.asarray(coeffs) * self._parity
        lead = c.shape[:-1]
        arr = c.reshape(lead + self.shape)
        axes = tuple(range(-self.d, 0))
        return np.fft.fftn(arr, axes=axes)

    def analyse_plus(self, f):
        """Inverse of :meth:`synth_plus`."""
        f = np.asarray(f)
        axes = tuple(range(-self.d, 0))
        out = np.fft.fftn(f, axes=axes).reshape(f.shape[: f.ndim - self.d] + (self.size,))
        return out * self._parity / self.size

    def analyse_minus(self, f):
        """Inverse of :meth:`synth_minus`."""
        f = np.asarray(f)
        axes = tuple(range(-self.d, 0))
        out = np.fft.ifftn(f, axes=axes).reshape(f.shape[: f.ndim - self.d] + (self.size,))
        return out * self._parity

    @property
    def phi_factor(self):
        """Per-mode coefficient ``1 / (2 (2pi)^{d/2} omega)`` of the field expansion."""
        return 1.0 / (2 * (2 * np.pi) ** (self.d / 2) * self.omegas)

    @property
    def pi_factor(self):
        return 1.0 / (2 * (2 * np.pi) ** (self.d / 2))


def _check_grid(a, b):
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


@dataclass
class ModeVector:
    """Complexified phase-space point ``(abar, a)``.

    ``abar`` and ``a`` are independent complex arrays of length ``N`` (or
    batched, shape ``(..., N)``); a real field corresponds to
    ``abar == conj(a)``, see :meth:`is_real`.
    """

    grid: ModeGrid
    abar: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.abar = np.asarray(self.abar, dtype=complex)
        self.a = np.asarray(self.a, dtype=complex)
        if self.abar.shape != self.a.shape or self.a.shape[-1:] != (self.grid.size,):
            raise GridMismatchError(
                f"mode arrays of shape {self.abar.shape}/{self.a.shape} do not match N={self.grid.size}"
            )

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.size, complex), np.zeros(grid.size, complex))

    @classmethod
    def from_stacked(cls, grid, zvec):
        zvec = np.asarray(zvec)
        n = grid.size
        return cls(grid, zvec[..., :n], zvec[..., n:])

    def stacked(self):
        """Coordinates ordered as the abar block followed by the a block."""
        return np.concatenate([self.abar, self.a], axis=-1)

    def is_real(self, atol=1e-12):
        scale = max(1.0, float(np.max(np.abs(self.a), initial=0.0)))
        return bool(np.allclose(self.abar, np.conj(self.a), rtol=0, atol=atol * scale))

    def copy(self):
        return ModeVector(self.grid, self.abar.copy(), self.a.copy())


@dataclass
class CauchyData:
    """Field and conjugate momentum sampled on the position lattice."""

    grid: ModeGrid
    phi: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi)
        self.pi = np.asarray(self.pi)
        shape = self.grid.shape
        if self.phi.shape != self.pi.shape or self.phi.shape[-len(shape):] != shape:
            raise GridMismatchError(
                f"Cauchy data of shape {self.phi.shape}/{self.pi.shape} do not match grid shape {shape}"
            )
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.pi))):
            raise ValueError("Cauchy data must be finite")


@dataclass
class PMVector:
    """Position-space pair ``(a_plus, a_minus)``."""

    grid: ModeGrid
    a_plus: np.ndarray
    a_minus: np.ndarray


def decompose(data: CauchyData) -> ModeVector:
    """Definite-energy Fourier modes of the Cauchy data ``(phi, pi)``.

    Inverts the field expansion exactly on the lattice; complex ``phi, pi``
    are accepted and give a complexified (non-real) mode vector.
    """
    g = data.grid
    scale = (2 * np.pi) ** g.d
    phi_hat = g.forward(data.phi) / (scale * g.phi_factor)
    pi_hat = g.forward(data.pi) / (scale * g.pi_factor)
    a = 0.5 * (phi_hat + 1j * pi_hat)
    r = g.reflection
    abar = 0.5 * (phi_hat[..., r] - 1j * pi_hat[..., r])
    return ModeVector(g, abar, a)


def reconstruct(modes: ModeVector, real: bool = True, atol: float = 1e-10) -> CauchyData:
    """Cauchy data of a mode vector.

    Parameters
    ----------
    real : bool
        Require ``abar == conj(a)`` and return real arrays.  With
        ``real=False`` complex fields are returned for complexified input.
    """
    g = modes.grid
    if real and not modes.is_real(atol=atol):
        raise RealityError("mode vector is not real (abar != conj(a)); pass real=False for complex fields")
    wphi = g.weight * g.phi_factor
    wpi = g.weight * g.pi_factor
    phi = g.synth_minus(wphi * modes.abar) + g.synth_plus(wphi * modes.a)
    pi = 1j * (g.synth_minus(wpi * modes.abar) - g.synth_plus(wpi * modes.a))
    if real:
        phi, pi = phi.real, pi.real
    return CauchyData(g, phi, pi)


def to_pm(modes: ModeVector) -> PMVector:
    """``a_plus(x) = i sum w/(2pi)^{d/2} abar e^{-ikx}``, ``a_minus(x) = -i sum w/(2pi)^{d/2} a e^{ikx}``."""
    g = modes.grid
    c = g.weight / (2 * np.pi) ** (g.d / 2)
    return PMVector(g, 1j * c * g.synth_minus(modes.abar), -1j * c * g.synth_plus(modes.a))


def from_pm(pm: PMVector) -> ModeVector:
    g = pm.grid
    c = g.weight / (2 * np.pi) ** (g.d / 2)
    abar = g.analyse_minus(pm.a_plus) / (1j * c)
    a = g.analyse_plus(pm.a_minus) / (-1j * c)
    return ModeVector(g, abar, a)


def energy_norm(modes: ModeVector):
    """Discrete L2 norm of ``(a_plus, a_minus)``: ``sqrt(sum_i w (|abar_i|^2 + |a_i|^2))``."""
    w = modes.grid.weight
    return np.sqrt(w * (np.sum(np.abs(modes.abar) ** 2, axis=-1) + np.sum(np.abs(modes.a) ** 2, axis=-1)))


def gaussian_cauchy(grid: ModeGrid, amplitude=0.1, width=2.0, momentum=0.0, center=None, pi_amplitude=None):
    """Smooth localized real Cauchy data: a Gaussian bump with an optional boost phase.

    ``phi = A exp(-|x-c|^2/(2 s^2)) cos(p x_1)``, ``pi = B exp(...) sin(p x_1)``
    (``B`` defaults to ``A``), so ``max|phi|, max|pi| <= A, B``.
    """
    x = grid.positions
    c = np.zeros(grid.d) if center is None else np.asarray(center, float)
    r2 = np.sum((x - c) ** 2, axis=-1)
    env = np.exp(-r2 / (2 * width**2))
    b = amplitude if pi_amplitude is None else pi_amplitude
    phi = amplitude * env * np.cos(momentum * x[:, 0])
    pi = b * env * np.sin(momentum * x[:, 0] + 0.3)
    return CauchyData(grid, phi.reshape(grid.shape), pi.reshape(grid.shape))


# -- serialization -----------------------------------------------------------------

def _cplx_list(arr):
    arr = np.asarray(arr).ravel()
    return [[float(v.real), float(v.imag)] for v in arr]


def dump_field(obj) -> dict:
    """JSON-ready dict with header ``{d, n_per_axis, kind}`` for a ModeVector or CauchyData."""
    g = obj.grid
    header = {"d": g.d, "n_per_axis": g.n_per_axis, "box_length": g.box_length, "mass": g.mass}
    if isinstance(obj, ModeVector):
        header["kind"] = "modes"
        header["batch"] = list(np.shape(obj.a)[:-1])
        return {"header": header, "abar": _cplx_list(obj.abar), "a": _cplx_list(obj.a)}
    if isinstance(obj, CauchyData):
        header["kind"] = "cauchy"
        return {
            "header": header,
            "phi": _cplx_list(obj.phi),
            "pi": _cplx_list(obj.pi),
        }
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_field(payload: dict, grid: ModeGrid | None = None):
    header = payload["header"]
    g = ModeGrid.from_config(header) if grid is None else grid
    if (header["d"], header["n_per_axis"]) != (g.d, g.n_per_axis):
        raise GridMismatchError("serialized field does not match the requested grid")

    def arr(key):
        v = np.asarray(payload[key], dtype=float)
        return v[:, 0] + 1j * v[:, 1]

    if header["kind"] == "modes":
        shape = tuple(header.get("batch", ())) + (g.size,)
        return ModeVector(g, arr("abar").reshape(shape), arr("a").reshape(shape))
    if header["kind"] == "cauchy":
        phi, pi = arr("phi"), arr("pi")
        if np.allclose(phi.imag, 0) and np.allclose(pi.imag, 0):
            phi, pi = phi.real, pi.real
        return CauchyData(g, phi.reshape(g.shape), pi.reshape(g.shape))
    raise ValueError(f"unknown field kind {header['kind']!r}")
