"""scikit-learn style transformers over stacked mode vectors.

Rows of ``X`` are samples.  Mode-space transformers take complex rows
``[abar | a]`` of length ``2N``; :class:`ModeDecomposer` maps real rows
``[phi | pi]`` of length ``2 * sites`` to that layout and back.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .formal_rep import invert, linearize
from .kleingordon import Potential, WaveOperatorEstimate, build_interaction, scattering_operator
from .modes import CauchyData, ModeGrid, ModeVector, decompose, reconstruct
from .validation import check_cauchy, check_modes


class _GridMixin:
    def _grid(self):
        return ModeGrid(self.d, self.n_per_axis, self.box_length, self.mass)


class ModeDecomposer(_GridMixin, TransformerMixin, BaseEstimator):
    """Cauchy data ``[phi | pi]`` to definite-energy modes ``[abar | a]``."""

    def __init__(self, d=1, n_per_axis=16, box_length=2 * np.pi, mass=1.0):
        self.d = d
        self.n_per_axis = n_per_axis
        self.box_length = box_length
        self.mass = mass

    def fit(self, X=None, y=None):
        self.grid_ = self._grid()
        if X is not None:
            check_cauchy(X, self.grid_.size)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        g = self.grid_
        X = check_cauchy(X, g.size)
        phi = X[:, : g.size].reshape((-1,) + g.shape)
        pi = X[:, g.size :].reshape((-1,) + g.shape)
        return decompose(CauchyData(g, phi, pi)).stacked()

    def inverse_transform(self, Z):
        check_is_fitted(self, "grid_")
        g = self.grid_
        Z = check_modes(Z, 2 * g.size)
        data = reconstruct(ModeVector.from_stacked(g, Z), real=True, atol=1e-8)
        n = Z.shape[0]
        return np.concatenate([data.phi.reshape(n, -1), data.pi.reshape(n, -1)], axis=1)


class WaveOperatorTransformer(_GridMixin, TransformerMixin, BaseEstimator):
    """Numerical wave operator ``Omega_pm`` on stacked mode rows; ``inverse_transform`` applies its inverse."""

    def __init__(self, d=2, n_per_axis=64, box_length=2 * np.pi * 8, mass=1.0, coeffs=None, horizon=50.0, dt=0.01, direction="+"):
        self.d = d
        self.n_per_axis = n_per_axis
        self.box_length = box_length
        self.mass = mass
        self.coeffs = coeffs
        self.horizon = horizon
        self.dt = dt
        self.direction = direction

    def fit(self, X=None, y=None):
        g = self._grid()
        V = Potential(self.coeffs or {})
        self.estimate_ = WaveOperatorEstimate(self.direction, float(self.horizon), float(self.dt), V, g)
        return self

    def transform(self, X):
        check_is_fitted(self, "estimate_")
        X = check_modes(X, 2 * self.estimate_.grid.size)
        return self.estimate_.apply_stacked(X)

    def inverse_transform(self, X):
        check_is_fitted(self, "estimate_")
        X = check_modes(X, 2 * self.estimate_.grid.size)
        return self.estimate_.inverse_stacked(X)


class ScatteringTransformer(WaveOperatorTransformer):
    """Classical scattering operator on stacked mode rows (``direction`` is ignored)."""

    def transform(self, X):
        check_is_fitted(self, "estimate_")
        g = self.estimate_.grid
        X = check_modes(X, 2 * g.size)
        v = ModeVector.from_stacked(g, X)
        return scattering_operator(self.estimate_.potential, self.estimate_.horizon, self.estimate_.dt, v).stacked()

    def inverse_transform(self, X):
        raise NotImplementedError("the inverse scattering operator is not provided")


class FormalLinearizer(_GridMixin, TransformerMixin, BaseEstimator):
    """Formal linearizing map ``Omega`` of the interacting representation.

    ``fit`` builds the generators and solves the homological equations;
    ``transform`` evaluates the truncated series on small mode rows.
    """

    def __init__(self, d=1, n_per_axis=4, box_length=2 * np.pi, mass=1.0, coeffs=None, degree_cap=3,
                 resonance_tol=None, on_resonance="raise"):
        self.d = d
        self.n_per_axis = n_per_axis
        self.box_length = box_length
        self.mass = mass
        self.coeffs = coeffs
        self.degree_cap = degree_cap
        self.resonance_tol = resonance_tol
        self.on_resonance = on_resonance

    def fit(self, X=None, y=None):
        g = self._grid()
        V = Potential(self.coeffs or {})
        gs = build_interaction(g, V, self.degree_cap, functionals=False)
        self.omega_, self.report_ = linearize(
            gs.rep(), resonance_tol=self.resonance_tol, degree_cap=self.degree_cap, on_resonance=self.on_resonance
        )
        self.omega_inverse_ = invert(self.omega_)
        return self

    def transform(self, X):
        check_is_fitted(self, "omega_")
        return self.omega_(check_modes(X, self.omega_.dim))

    def inverse_transform(self, X):
        check_is_fitted(self, "omega_")
        return self.omega_inverse_(check_modes(X, self.omega_.dim))
