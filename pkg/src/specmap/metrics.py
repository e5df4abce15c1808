"""Reconstruction error metrics and source alignment."""

from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np

from .numerics import InvalidInputError

__all__ = ["align_sources", "best_permutation", "nmse"]

MAX_ALIGN_SOURCES = 6


def nmse(estimate, truth):
    """``||estimate - truth||_F^2 / ||truth||_F^2``."""
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch {est.shape} vs {ref.shape}")
    denom = float(np.sum(ref * ref))
    if denom == 0:
        raise InvalidInputError("reference has zero norm")
    return float(np.sum((est - ref) ** 2)) / denom


def best_permutation(est_spectra, true_spectra):
    """Ordering of estimated sources that minimizes the spectrum NMSE.

    Returns ``perm`` such that estimated source ``perm[r]`` is matched to
    true source ``r``.
    """
    est = np.asarray(est_spectra, dtype=float)
    ref = np.asarray(true_spectra, dtype=float)
    R = ref.shape[0]
    if est.shape != ref.shape:
        raise InvalidInputError("estimated and true spectra differ in shape")
    if R > MAX_ALIGN_SOURCES:
        raise InvalidInputError(f"alignment is exhaustive and limited to {MAX_ALIGN_SOURCES} sources")
    cost = np.sum((est[None, :, :] - ref[:, None, :]) ** 2, axis=-1)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(R)):
        c = sum(cost[r, perm[r]] for r in range(R))
        if c < best_cost:
            best, best_cost = perm, c
    return tuple(best)


def align_sources(est, truth):
    """Reorder the sources of an :class:`~specmap.solver.Estimate` to match ``truth``.

    Fields and spectra are permuted together; the tensor is unchanged.
    """
    perm = list(best_permutation(est.spectra_hat, truth.spectra))
    theta = None if est.theta is None else est.theta[:, perm]
    return replace(est, fields_hat=est.fields_hat[perm], spectra_hat=est.spectra_hat[perm], theta=theta)
