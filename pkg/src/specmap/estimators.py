"""scikit-learn style wrappers around the solver and the band-by-band baseline.

``X`` holds sensor coordinates ``(M, 2)`` and ``y`` the readings ``(M, K)``
with NaN for bands a sensor did not observe. ``predict`` returns the map
value at arbitrary points, looked up at the nearest cell center.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .baseline import lpr_per_band
from .grid import Grid
from .numerics import InvalidInputError, SvtConfig
from .scene import MeasurementSet
from .solver import KernelConfig, SolverConfig, solve

__all__ = ["BTDSpectrumMapper", "BandwiseLPR"]


def _measurements(X, y):
    X = check_array(X, dtype=float)
    y = check_array(y, dtype=float, ensure_all_finite="allow-nan")
    if X.shape[1] != 2:
        raise InvalidInputError("X must have two columns (sensor coordinates)")
    if y.shape[0] != X.shape[0]:
        raise InvalidInputError("X and y differ in the number of sensors")
    mask = ~np.isnan(y)
    return MeasurementSet(X, mask, np.where(mask, y, np.nan), on_grid=False)


class _MapMixin:
    def _grid(self):
        return Grid(self.n_cells, self.n_cells, self.area_side, self.origin[0], self.origin[1])

    def predict(self, X):
        """Map values ``(P, K)`` at the cells containing the points ``X``."""
        check_is_fitted(self, "tensor_")
        X = check_array(X, dtype=float)
        flat = self.tensor_.reshape(-1, self.tensor_.shape[-1])
        return flat[self.grid_.cell_of(X)]

    def score(self, X, y, sample_weight=None):
        """One minus the normalized squared error over observed entries."""
        y = np.asarray(y, dtype=float)
        pred = self.predict(X)
        ok = ~np.isnan(y)
        return 1.0 - float(np.sum((pred[ok] - y[ok]) ** 2) / np.sum(y[ok] ** 2))


class BTDSpectrumMapper(_MapMixin, RegressorMixin, BaseEstimator):
    """Integrated interpolation with a low-rank block-term model.

    Parameters
    ----------
    n_sources : int
    n_cells : int
        Grid cells per side.
    area_side : float
        Side length of the square area.
    origin : tuple of float
        Lower-left corner of the area.
    nu, mu : float
        Coupling and nuclear-norm weights.
    min_neighbors : int
        Sensors inside the adaptive kernel window.
    interp_set : {"random", "full", "stride"}
    max_outer : int
    phi_update : {"simplex", "nnls_normalize"}
    init : {"nmf", "uniform"}
    random_state : int

    Attributes
    ----------
    fields_ : array, shape (n_sources, n_cells, n_cells)
    spectra_ : array, shape (n_sources, K)
    tensor_ : array, shape (n_cells, n_cells, K)
    objective_trace_ : tuple of float
    converged_ : bool
    """

    def __init__(self, n_sources=2, n_cells=31, area_side=50.0, origin=(0.0, 0.0), nu=1e-4, mu=0.01,
                 min_neighbors=14, interp_set="random", max_outer=30, phi_update="simplex",
                 init="nmf", svt_max_iter=200, random_state=0):
        self.n_sources = n_sources
        self.n_cells = n_cells
        self.area_side = area_side
        self.origin = origin
        self.nu = nu
        self.mu = mu
        self.min_neighbors = min_neighbors
        self.interp_set = interp_set
        self.max_outer = max_outer
        self.phi_update = phi_update
        self.init = init
        self.svt_max_iter = svt_max_iter
        self.random_state = random_state

    def fit(self, X, y):
        ms = _measurements(X, y)
        self.grid_ = self._grid()
        cfg = SolverConfig(nu=self.nu, mu=self.mu, interp_set=self.interp_set, max_outer=self.max_outer,
                           phi_update=self.phi_update, init=self.init, seed=self.random_state,
                           svt=SvtConfig(max_iter=self.svt_max_iter, tol=1e-5))
        est = solve(ms, self.grid_, KernelConfig(min_neighbors=self.min_neighbors), cfg, self.n_sources)
        self.fields_ = est.fields_hat
        self.spectra_ = est.spectra_hat
        self.tensor_ = est.tensor_hat
        self.objective_trace_ = est.objective_trace
        self.converged_ = est.converged
        self.n_features_in_ = 2
        return self


class BandwiseLPR(_MapMixin, RegressorMixin, BaseEstimator):
    """Independent kernel-weighted quadratic fit for every band.

    Parameters
    ----------
    n_cells, area_side, origin, min_neighbors
        As for :class:`BTDSpectrumMapper`.

    Attributes
    ----------
    tensor_ : array, shape (n_cells, n_cells, K)
    flagged_ : array of bool, shape (K, n_cells, n_cells)
    """

    def __init__(self, n_cells=31, area_side=50.0, origin=(0.0, 0.0), min_neighbors=14):
        self.n_cells = n_cells
        self.area_side = area_side
        self.origin = origin
        self.min_neighbors = min_neighbors

    def fit(self, X, y):
        ms = _measurements(X, y)
        self.grid_ = self._grid()
        est = lpr_per_band(ms, self.grid_, KernelConfig(min_neighbors=self.min_neighbors))
        self.tensor_ = est.tensor()
        self.flagged_ = est.flagged
        self.n_features_in_ = 2
        return self
