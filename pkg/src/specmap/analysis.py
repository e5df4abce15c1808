"""Closed-form noise variance of local interpolators and a Monte Carlo check.

All closed forms share the topology constant
``C = [A1^{-1} A2 A1^{-1}]_{11}`` with ``A1 = sum_m kappa_m x_m x_m^T`` and
``A2 = sum_m kappa_m^2 x_m x_m^T``. Because the quadratic design vector
repeats the mixed monomial, ``A1`` as a seven-column matrix is singular;
``C`` is evaluated in the six-monomial basis, which leaves the constant
term (and hence ``C``) unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baseline import local_constant_weights
from .numerics import DegenerateProblemError, InvalidInputError
from .solver import N_REDUCED, _Problem, _theta_system, design_matrix, kernel_weights

__all__ = [
    "FormulaError",
    "MonteCarloResult",
    "Scenario",
    "TopologyMatrices",
    "VariancePrediction",
    "monte_carlo_variance",
    "predict_all",
    "predict_variance_lpr",
    "predict_variance_lpr_exact",
    "predict_variance_sparse",
    "predict_variance_tensor",
    "predict_variance_two_source",
    "spectrum_coefficients",
    "topology_constant",
    "two_source_coefficients",
    "variance_gap",
]

MONOMIALS = ("1", "dx", "dy", "dx^2", "dx*dy", "dy^2")
MIN_TRIALS = 100
CHUNK = 10_000


class FormulaError(AssertionError):
    """A closed-form result violated one of its proven bounds."""


@dataclass(frozen=True)
class TopologyMatrices:
    a1: np.ndarray
    a2: np.ndarray
    c_const: float
    weights: np.ndarray = field(default=None, repr=False)
    bandwidth: float = float("nan")


def topology_constant(sensors, cell, kcfg):
    """Moment matrices of the kernel-weighted quadratic fit at ``cell``.

    Parameters
    ----------
    sensors : array, shape (M, 2)
    cell : array, shape (2,)
        Cell center.
    kcfg : KernelConfig

    Returns
    -------
    TopologyMatrices
        ``a1`` and ``a2`` are the seven-column moment matrices;
        ``c_const`` is the noise amplification of the constant term.

    Raises
    ------
    DegenerateProblemError
        If the weighted moments do not determine a quadratic; the message
        names the monomial combinations left unresolved.
    """
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    cell = np.asarray(cell, dtype=float)
    nb = kernel_weights(cell[None, :], sensors, kcfg)
    w = np.zeros(sensors.shape[0])
    w[nb.index[0]] = nb.weight[0]
    X7 = design_matrix(sensors, cell)
    a1 = np.einsum("m,mp,mq->pq", w, X7, X7)
    a2 = np.einsum("m,mp,mq->pq", w * w, X7, X7)
    X6 = design_matrix(sensors, cell, reduced=True)
    r1 = np.einsum("m,mp,mq->pq", w, X6, X6)
    r2 = np.einsum("m,mp,mq->pq", w * w, X6, X6)
    evals, evecs = np.linalg.eigh(r1)
    if evals[0] <= 1e-12 * max(evals[-1], np.finfo(float).tiny):
        null = evecs[:, evals <= 1e-12 * max(evals[-1], np.finfo(float).tiny)]
        names = []
        for v in null.T:
            terms = [f"{v[i]:+.3f}*{MONOMIALS[i]}" for i in np.argsort(-np.abs(v))[:3] if abs(v[i]) > 1e-6]
            names.append(" ".join(terms))
        raise DegenerateProblemError(
            "kernel-weighted moment matrix is singular along " + "; ".join(names),
            columns=[int(np.argmax(np.abs(v))) for v in null.T])
    inv = np.linalg.inv(r1)
    c = float((inv @ r2 @ inv)[0, 0])
    return TopologyMatrices(a1, a2, c, w, float(nb.bandwidth[0]))


def _c(topo):
    return topo.c_const if isinstance(topo, TopologyMatrices) else float(topo)


def _check(cond, msg):
    if not cond:
        raise FormulaError(msg)


def spectrum_coefficients(phi):
    """Fading and noise coefficients of the single-source variance.

    Returns ``(w_eta, w_eps)`` with ``w_eta = sum phi^4 / (sum phi^2)^2`` and
    ``w_eps = 1 / sum phi^2``. For a spectrum summing to ``K`` both obey
    ``1/K <= w_eta <= 1`` and ``1/K^2 <= w_eps <= 1/K``.
    """
    phi = np.asarray(phi, dtype=float).ravel()
    if np.any(phi < 0) or not np.any(phi > 0):
        raise InvalidInputError("spectrum must be nonnegative and not all zero")
    K = phi.size
    s2 = float(np.sum(phi ** 2))
    w_eta = float(np.sum(phi ** 4)) / s2 ** 2
    w_eps = 1.0 / s2
    tol = 1e-12
    _check(1.0 / K - tol <= w_eta <= 1.0 + tol, f"fading coefficient {w_eta} outside [1/K, 1]")
    if abs(phi.sum() - K) <= 1e-9 * K:
        _check(1.0 / K ** 2 - tol <= w_eps <= 1.0 / K + tol, f"noise coefficient {w_eps} outside [1/K^2, 1/K]")
    return w_eta, w_eps


def predict_variance_tensor(phi, sigma_eta, sigma_eps, topo):
    """Noise variance of the integrated single-source interpolator."""
    w_eta, w_eps = spectrum_coefficients(phi)
    return (w_eta * sigma_eta ** 2 + w_eps * sigma_eps ** 2) * _c(topo)


def _positive(phi):
    phi = np.asarray(phi, dtype=float).ravel()
    if np.any(phi <= 0):
        raise InvalidInputError("band-by-band variance diverges when a band carries no power")
    return phi


def predict_variance_lpr(phi, sigma_eta, sigma_eps, topo):
    """Band-averaged interpolator variance in the published closed form.

    ``(sigma_eta^2 + sum_k sigma_eps^2 / (phi_k^2 K)) * C``. The band
    average of ``K`` independent per-band errors actually has ``1/K`` of
    this variance; see :func:`predict_variance_lpr_exact`.
    """
    phi = _positive(phi)
    K = phi.size
    return (sigma_eta ** 2 + float(np.sum(1.0 / (phi ** 2 * K))) * sigma_eps ** 2) * _c(topo)


def predict_variance_lpr_exact(phi, sigma_eta, sigma_eps, topo):
    """Exact variance of the mean of ``K`` independent per-band estimates.

    Band ``k`` divided by ``phi_k`` has variance
    ``(sigma_eta^2 + sigma_eps^2 / phi_k^2) C``; the mean over bands divides
    the sum by ``K^2``.
    """
    return predict_variance_lpr(phi, sigma_eta, sigma_eps, topo) / np.asarray(phi).size


def variance_gap(phi, sigma_eta, sigma_eps, topo):
    """Difference between the band-by-band and integrated variances.

    Returns ``(gap, s_eta, s_eps)`` with
    ``gap = (s_eta sigma_eta^2 + s_eps sigma_eps^2) C`` where
    ``s_eta = 1 - sum phi^4 / (sum phi^2)^2`` (twice the sum over unordered
    band pairs of ``phi_i^2 phi_j^2``, normalized) and
    ``s_eps = sum_k sum_{l != k} phi_l^2 / (phi_k^2 K) / sum phi^2``.
    The gap is measured against :func:`predict_variance_lpr`.
    """
    phi = _positive(phi)
    K = phi.size
    p2 = phi ** 2
    s2 = float(p2.sum())
    s_eta = 1.0 - float(np.sum(p2 ** 2)) / s2 ** 2
    s_eps = float(np.sum((s2 - p2) / (p2 * K))) / s2
    tol = 1e-12
    bound = (K - 1) / K
    _check(-tol <= s_eta <= bound + tol, f"fading gap coefficient {s_eta} outside [0, (K-1)/K]")
    if abs(phi.sum() - K) <= 1e-9 * K:
        _check(s_eps >= bound - 1e-9, f"noise gap coefficient {s_eps} below (K-1)/K")
    gap = (s_eta * sigma_eta ** 2 + s_eps * sigma_eps ** 2) * _c(topo)
    direct = predict_variance_lpr(phi, sigma_eta, sigma_eps, topo) - predict_variance_tensor(
        phi, sigma_eta, sigma_eps, topo)
    _check(abs(gap - direct) <= 1e-12 * max(1.0, abs(direct)), "gap identity violated")
    return gap, s_eta, s_eps


def predict_variance_sparse(k_prime, sigma_eta, sigma_eps, topo, n_bands=None):
    """Integrated variance with flat spectrum when each sensor sees ``k_prime`` bands."""
    if k_prime < 1 or (n_bands is not None and k_prime > n_bands):
        raise InvalidInputError("k_prime must lie in [1, K]")
    return (sigma_eta ** 2 + sigma_eps ** 2) * _c(topo) / k_prime


def two_source_coefficients(eta, n_bands):
    """Fading and noise coefficients of two sources sharing ``eta K`` bands.

    Both equal ``2 / K`` at ``eta = 0`` and grow without bound as ``eta``
    approaches 1. The fading coefficient is nondecreasing and never below
    ``2 / K``. The noise coefficient dips below ``2 / K`` for
    ``0 < eta < 1/3`` (minimum near ``eta = 0.155``), because each source
    then occupies more than ``K / 2`` bands.
    """
    if not 0 <= eta < 1:
        raise InvalidInputError("overlap ratio must lie in [0, 1); the sources are inseparable at 1")
    K = float(n_bands)
    w_eta = (2 - 10 * eta ** 2 + 10 * eta - 2 * eta ** 3) / (K * (1 - 3 * eta ** 2 + 2 * eta) ** 2)
    w_eps = 2 * (-eta - 1) / (K * (3 * eta ** 2 - 2 * eta - 1))
    if eta == 0:
        w_eta = w_eps = 2.0 / K
    _check(w_eta >= 2 / K - 1e-12, "two-source fading coefficient below 2/K")
    _check(w_eps > 0, "two-source noise coefficient not positive")
    return w_eta, w_eps


def predict_variance_two_source(eta, n_bands, sigma_eta, sigma_eps, topo):
    """Returns ``(variance, w_eta, w_eps)`` for the two-source layout."""
    w_eta, w_eps = two_source_coefficients(eta, n_bands)
    return (w_eta * sigma_eta ** 2 + w_eps * sigma_eps ** 2) * _c(topo), w_eta, w_eps


@dataclass(frozen=True)
class VariancePrediction:
    e_t: float
    e_p: float
    gap: float
    e_sparse: float
    e_m: float
    coeffs: dict


def predict_all(phi, sigma_eta, sigma_eps, topo, k_prime=None, eta=0.0):
    """Every closed form for one spectrum and topology."""
    phi = np.asarray(phi, dtype=float).ravel()
    K = phi.size
    w_eta, w_eps = spectrum_coefficients(phi)
    gap, s_eta, s_eps = variance_gap(phi, sigma_eta, sigma_eps, topo)
    e_m, m_eta, m_eps = predict_variance_two_source(eta, K, sigma_eta, sigma_eps, topo)
    return VariancePrediction(
        e_t=predict_variance_tensor(phi, sigma_eta, sigma_eps, topo),
        e_p=predict_variance_lpr(phi, sigma_eta, sigma_eps, topo),
        gap=gap,
        e_sparse=predict_variance_sparse(k_prime or K, sigma_eta, sigma_eps, topo, K),
        e_m=e_m,
        coeffs={"w_eta": w_eta, "w_eps": w_eps, "s_eta": s_eta, "s_eps": s_eps,
                "w_eta_overlap": m_eta, "w_eps_overlap": m_eps},
    )


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Fixed sensor layout, spectra and noise levels for variance trials.

    ``spectra`` is ``(R, K)``; ``band_mask`` defaults to all bands. The
    smooth ``field`` (one callable per source, defaulting to a tilted bump)
    only sets the noiseless readings that every trial is differenced
    against.
    """

    sensors: np.ndarray
    cell: np.ndarray
    spectra: np.ndarray
    sigma_eta: float
    sigma_eps: float
    kcfg: object
    band_mask: np.ndarray | None = None
    fields: tuple = ()

    def mask(self):
        K = np.atleast_2d(self.spectra).shape[1]
        M = np.asarray(self.sensors).shape[0]
        return np.ones((M, K), dtype=bool) if self.band_mask is None else np.asarray(self.band_mask, bool)

    def clean_readings(self):
        phi = np.atleast_2d(np.asarray(self.spectra, dtype=float))
        z = np.asarray(self.sensors, dtype=float)
        out = np.zeros((z.shape[0], phi.shape[1]))
        for r in range(phi.shape[0]):
            f = self.fields[r] if r < len(self.fields) else _default_field(r)
            out += f(z)[:, None] * phi[r][None, :]
        return out


def _default_field(r):
    def f(z):
        return 1.0 + 0.1 * (r + 1) * z[:, 0] - 0.05 * z[:, 1] + np.exp(-0.01 * np.sum(z ** 2, axis=1))
    return f


@dataclass(frozen=True)
class MonteCarloResult:
    variance: float
    std_error: float
    n_trials: int


def _jackknife_variance(x):
    """Sample variance and its jackknife standard error, in closed form."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    s2 = float(np.sum(xc * xc))
    var = s2 / (n - 1)
    # leave-one-out sums of squares about the leave-one-out mean
    loo = (s2 - xc * xc * n / (n - 1)) / (n - 2)
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return var, se


def _integrated_functional(scn, source):
    """Solve the local system once; returns a map from readings to the constant term."""
    phi = np.atleast_2d(np.asarray(scn.spectra, dtype=float))
    z = np.asarray(scn.sensors, dtype=float)
    cell = np.asarray(scn.cell, dtype=float)
    nb = kernel_weights(cell[None, :], z, scn.kcfg)
    prob = _Problem(np.array([0]), nb.weight, nb.index,
                    design_matrix(z[nb.index], cell[None, None, :], reduced=True),
                    np.zeros(scn.mask().shape), scn.mask().astype(float), (1, 1))
    N, _ = _theta_system(prob, phi)
    evals = np.linalg.eigvalsh(N[0])
    if evals[0] <= 1e-12 * evals[-1]:
        raise DegenerateProblemError("local system of the scenario is singular")
    inv = np.linalg.inv(N[0])

    def apply(readings):
        _, rhs = _theta_system(prob, phi, readings)
        return rhs[0] @ inv[source * N_REDUCED]

    return apply


def _lpr_functional(scn):
    phi = np.atleast_2d(np.asarray(scn.spectra, dtype=float))
    if phi.shape[0] != 1:
        raise InvalidInputError("the band-by-band estimator needs a single source")
    phi = _positive(phi[0])
    z = np.asarray(scn.sensors, dtype=float)
    cell = np.asarray(scn.cell, dtype=float)
    mask = scn.mask()
    K = phi.size
    coef = np.zeros((z.shape[0], K))
    for k in range(K):
        sel = np.flatnonzero(mask[:, k])
        nb = kernel_weights(cell[None, :], z[sel], scn.kcfg)
        lin, bad = local_constant_weights(cell[None, :], z[sel][nb.index], nb.weight)
        if bad[0]:
            raise DegenerateProblemError(f"band {k} has a singular local system")
        np.add.at(coef[:, k], sel[nb.index[0]], lin[0])
    coef /= phi[None, :] * K

    def apply(readings):
        return np.einsum("...mk,mk->...", readings, coef)

    return apply


def monte_carlo_variance(scenario, estimator="integrated", n_trials=100_000, seed=0, source=0):
    """Empirical noise variance of a local interpolator at one cell.

    Every trial redraws the fading ``eta`` (per sensor, source and band) and
    the additive noise ``eps`` (per sensor and band); sensors, spectra and
    kernel stay fixed. The estimate of the noiseless readings is subtracted
    from each trial, so only the noise-driven error remains.

    Parameters
    ----------
    scenario : Scenario
    estimator : {"integrated", "lpr", "two_source"}
        ``"integrated"`` and ``"two_source"`` use the joint local fit with
        known spectra and no coupling; ``"lpr"`` averages the per-band fits
        after dividing band ``k`` by ``phi_k``.
    n_trials : int
        At least 100.
    seed : int
        Trials are drawn in blocks of 10000; block ``b`` uses child ``b`` of
        ``SeedSequence(seed)``, so results do not depend on scheduling.
    source : int
        Source whose constant term is examined.

    Returns
    -------
    MonteCarloResult
    """
    if n_trials < MIN_TRIALS:
        raise InvalidInputError(f"refusing to estimate a variance from fewer than {MIN_TRIALS} trials")
    phi = np.atleast_2d(np.asarray(scenario.spectra, dtype=float))
    R, K = phi.shape
    if estimator in ("integrated", "two_source"):
        fn = _integrated_functional(scenario, source)
    elif estimator == "lpr":
        fn = _lpr_functional(scenario)
    else:
        raise InvalidInputError(f"unknown estimator {estimator!r}")
    mask = scenario.mask()
    clean = scenario.clean_readings()
    base = fn(clean)
    M = clean.shape[0]
    n_blocks = -(-n_trials // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    errors = []
    for b, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = min(CHUNK, n_trials - b * CHUNK)
        eta = rng.standard_normal((n, M, R, K)) * scenario.sigma_eta
        eps = rng.standard_normal((n, M, K)) * scenario.sigma_eps
        noisy = clean[None] + np.einsum("tmrk,rk->tmk", eta, phi) + eps
        noisy = np.where(mask[None], noisy, 0.0)
        errors.append(fn(noisy) - base)
    var, se = _jackknife_variance(np.concatenate(errors))
    return MonteCarloResult(var, se, int(n_trials))
