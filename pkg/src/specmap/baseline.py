"""Band-by-band local polynomial interpolation.

Each band is interpolated on its own from the sensors that observed it,
with the same quadratic model and kernel as the integrated solver but no
coupling across bands or sources.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError
from .solver import N_REDUCED, _COND_FLOOR, design_matrix, kernel_weights

__all__ = ["BandEstimate", "lpr_per_band", "local_constant_weights"]


@dataclass(frozen=True)
class BandEstimate:
    """Per-band constant terms and their band average.

    ``alpha_k`` has shape ``(K, n1, n2)``; ``flagged`` marks cells whose
    local system was singular for a band. Those entries are NaN in
    ``alpha_k`` and left out of ``alpha_avg``.
    """

    alpha_k: np.ndarray
    alpha_avg: np.ndarray
    flagged: np.ndarray

    def tensor(self):
        """``(n1, n2, K)`` map with flagged entries replaced by the band mean."""
        out = np.moveaxis(self.alpha_k, 0, -1).copy()
        for k in range(out.shape[-1]):
            band = out[..., k]
            bad = np.isnan(band)
            if bad.any():
                band[bad] = np.nanmean(band) if not bad.all() else 0.0
        return out


def local_constant_weights(centers, points, weights):
    """Linear functionals mapping readings to fitted constant terms.

    For every cell ``c`` returns ``l_c`` with ``alpha_c = l_c @ y`` for the
    kernel-weighted quadratic fit of ``y`` at ``points``. Cells whose moment
    matrix is singular get NaN rows.

    Parameters
    ----------
    centers : array, shape (C, 2)
    points : array, shape (C, P, 2)
        Neighbor locations of each cell.
    weights : array, shape (C, P)
    """
    X = design_matrix(points, np.asarray(centers, float)[:, None, :], reduced=True)
    A = np.einsum("cp,cpi,cpj->cij", weights, X, X)
    evals = np.linalg.eigvalsh(A)
    ok = evals[:, 0] > _COND_FLOOR * np.maximum(evals[:, -1], np.finfo(float).tiny)
    out = np.full(weights.shape, np.nan)
    if ok.any():
        e0 = np.zeros(N_REDUCED)
        e0[0] = 1.0
        rows = np.linalg.solve(A[ok], np.broadcast_to(e0, (int(ok.sum()), N_REDUCED))[..., None])[..., 0]
        out[ok] = np.einsum("ci,cpi,cp->cp", rows, X[ok], weights[ok])
    return out, ~ok


def lpr_per_band(measurements, grid, kcfg, spectra=None):
    """Interpolate every band independently at all cell centers.

    Parameters
    ----------
    measurements : MeasurementSet
    grid : Grid
    kcfg : KernelConfig
        Bandwidth rule, applied per band to the sensors observing it.
    spectra : array, shape (K,), optional
        When given, band ``k`` is divided by ``spectra[k]`` before averaging,
        so ``alpha_avg`` estimates the field rather than the mean power.

    Returns
    -------
    BandEstimate
    """
    K = measurements.n_bands
    centers = grid.flat_centers()
    alpha = np.full((K, grid.n_cells), np.nan)
    flagged = np.zeros((K, grid.n_cells), dtype=bool)
    for k in range(K):
        sel = np.flatnonzero(measurements.band_mask[:, k])
        if sel.size == 0:
            flagged[k] = True
            continue
        try:
            nb = kernel_weights(centers, measurements.locations[sel], kcfg)
        except InvalidInputError:
            flagged[k] = True
            continue
        lin, bad = local_constant_weights(centers, measurements.locations[sel][nb.index], nb.weight)
        vals = measurements.readings[sel, k][nb.index]
        alpha[k] = np.where(bad, np.nan, np.sum(np.nan_to_num(lin) * vals, axis=1))
        flagged[k] = bad
    if flagged.any():
        warnings.warn(f"{int(flagged.sum())} band/cell fits were singular and are excluded",
                      RuntimeWarning, stacklevel=2)
    alpha = alpha.reshape((K,) + grid.shape)
    flagged = flagged.reshape((K,) + grid.shape)
    scaled = alpha
    if spectra is not None:
        spectra = np.asarray(spectra, dtype=float).ravel()
        if spectra.shape != (K,):
            raise InvalidInputError("spectra must have one entry per band")
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = alpha / spectra[:, None, None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        avg = np.nanmean(scaled, axis=0)
    return BandEstimate(alpha, avg, flagged)
