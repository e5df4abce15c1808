"""Integrated local polynomial interpolation and block-term decomposition.

The solver estimates source fields ``S_r`` (``n1 x n2``) and spectra
``phi_r`` (length ``K``) from scattered multi-band readings by minimizing

    sum_{c in I} sum_{m, k} kappa_c(z_m) psi_mk (gamma_mk - sum_r phi_rk x_cm^T theta_cr)^2
        + nu * sum_{c in I} sum_r (alpha_cr - S_r[c])^2
        + nu * mu * sum_r ||S_r||_*

where ``theta_cr`` holds the seven coefficients of a local quadratic model
of source ``r`` around cell center ``c``, ``alpha_cr`` is its constant term,
``x_cm`` the quadratic design vector of sensor ``m`` relative to ``c`` and
``kappa_c`` an Epanechnikov kernel. Minimization alternates over the local
models, the spectra and the fields. Each block update is exact (or
rejected when it would raise the objective), so the objective trace is
nonincreasing.

The design vector ``[1, dx, dy, dx^2, dy dx, dx dy, dy^2]`` repeats the
mixed monomial, which makes every seven-column normal matrix singular.
Solves therefore run in the six-monomial basis and split the mixed
coefficient evenly between the two slots, which is the minimum-norm
solution of the seven-column problem.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Grid
from .numerics import (
    InvalidInputError,
    ObservedMatrix,
    masked_nmf,
    SvtConfig,
    nnls_gram,
    nnls_gram_sum_constrained,
    svt_complete,
)

__all__ = [
    "Estimate",
    "KernelConfig",
    "Neighborhoods",
    "SolverConfig",
    "SolverError",
    "assemble_normal_matrix",
    "design_matrix",
    "design_vector",
    "interpolation_mask",
    "kernel_weights",
    "objective_value",
    "solve",
    "update_fields",
    "update_phi",
    "update_theta",
]

log = logging.getLogger(__name__)

N_COEF = 7
N_REDUCED = 6
# conditioning threshold on the ratio of extreme eigenvalues of a local system
_COND_FLOOR = 1e-12


class SolverError(RuntimeError):
    """A subproblem failed; ``estimate`` holds the last consistent iterate."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


# --------------------------------------------------------------------------
# local design
# --------------------------------------------------------------------------


def design_vector(z, c):
    """Quadratic design vector ``[1, dx, dy, dx^2, dy dx, dx dy, dy^2]``.

    The last four entries are the column-major vectorization of the outer
    product ``(z - c)(z - c)^T``.
    """
    dx, dy = np.asarray(z, dtype=float) - np.asarray(c, dtype=float)
    return np.array([1.0, dx, dy, dx * dx, dy * dx, dx * dy, dy * dy])


def design_matrix(points, center, reduced=False):
    """Stack design vectors of ``points`` (``(..., 2)``) around ``center``."""
    d = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    dx, dy = d[..., 0], d[..., 1]
    one = np.ones_like(dx)
    if reduced:
        return np.stack([one, dx, dy, dx * dx, dx * dy, dy * dy], axis=-1)
    return np.stack([one, dx, dy, dx * dx, dy * dx, dx * dy, dy * dy], axis=-1)


def reduce_coefficients(theta):
    """Merge the two mixed-monomial slots of seven-slot coefficients."""
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([theta[..., :4], theta[..., 4:5] + theta[..., 5:6], theta[..., 6:]], axis=-1)


def expand_coefficients(reduced):
    """Map six-monomial coefficients to the seven-slot layout."""
    reduced = np.asarray(reduced, dtype=float)
    half = 0.5 * reduced[..., 4:5]
    return np.concatenate([reduced[..., :4], half, half, reduced[..., 5:]], axis=-1)


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------


def epanechnikov(u):
    """``max(0, 3/4 (1 - u^2))`` for the norm ``u`` of the scaled offset."""
    u = np.asarray(u, dtype=float)
    return np.maximum(0.0, 0.75 * (1.0 - u * u))


@dataclass(frozen=True)
class KernelConfig:
    """Epanechnikov kernel with a fixed or adaptive bandwidth.

    With ``bandwidth=None`` every cell gets the smallest bandwidth that
    leaves at least ``min_neighbors`` sensors with strictly positive weight.
    """

    kind: str = "epanechnikov"
    bandwidth: float | None = None
    min_neighbors: int = 14

    def __post_init__(self):
        if self.kind != "epanechnikov":
            raise InvalidInputError(f"unsupported kernel {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidInputError("bandwidth must be positive")
        if self.bandwidth is None and self.min_neighbors < N_COEF:
            raise InvalidInputError("min_neighbors must be at least 7")


@dataclass(frozen=True)
class Neighborhoods:
    """Sensors inside each cell's kernel window.

    ``index`` and ``weight`` have shape ``(n_cells, P)``; padded slots carry
    index 0 and weight 0.
    """

    index: np.ndarray
    weight: np.ndarray
    bandwidth: np.ndarray
    centers: np.ndarray

    @property
    def n_positive(self):
        return (self.weight > 0).sum(axis=1)

    def dense(self, n_sensors):
        """Weight matrix of shape ``(n_cells, n_sensors)``."""
        W = np.zeros((self.index.shape[0], n_sensors))
        np.add.at(W, (np.arange(self.index.shape[0])[:, None], self.index), self.weight)
        return W


def _adaptive_bandwidth(dist_sorted, m0):
    M = dist_sorted.shape[1]
    if M < m0:
        raise InvalidInputError(f"need at least {m0} sensors, got {M}")
    if M == m0:
        return dist_sorted[:, m0 - 1] * (1 + 1e-6) + 1e-300
    inner = dist_sorted[:, m0 - 1:m0]
    # first sorted distance strictly beyond the m0-th one
    beyond = dist_sorted[:, m0:] > inner
    has = beyond.any(axis=1)
    first = np.argmax(beyond, axis=1) + m0
    b = dist_sorted[np.arange(len(first)), first]
    return np.where(has, b, dist_sorted[:, -1] * (1 + 1e-6) + 1e-300)


def kernel_weights(centers, sensors, kcfg):
    """Kernel weights of every sensor at every cell center.

    Parameters
    ----------
    centers : array, shape (n_cells, 2)
    sensors : array, shape (M, 2)
    kcfg : KernelConfig

    Returns
    -------
    Neighborhoods
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    if sensors.shape[0] == 0:
        raise InvalidInputError("no sensors")
    dist = np.sqrt(np.sum((centers[:, None, :] - sensors[None, :, :]) ** 2, axis=-1))
    order = np.argsort(dist, axis=1, kind="stable")
    dist_sorted = np.take_along_axis(dist, order, axis=1)
    if kcfg.bandwidth is None:
        b = _adaptive_bandwidth(dist_sorted, kcfg.min_neighbors)
    else:
        b = np.full(centers.shape[0], float(kcfg.bandwidth))
    w_sorted = epanechnikov(dist_sorted / b[:, None])
    width = max(int((w_sorted > 0).sum(axis=1).max()), 1)
    index = order[:, :width]
    weight = w_sorted[:, :width]
    return Neighborhoods(index, weight, b, centers)


# --------------------------------------------------------------------------
# configuration and state
# --------------------------------------------------------------------------


def interpolation_mask(shape, spec="random", fraction=0.5, stride=2, cells=None, seed=0):
    """Boolean mask of the cells that get a local model.

    ``spec`` is ``"full"``, ``"random"`` (a seeded uniform subset holding
    ``fraction`` of the cells), ``"stride"`` (cells with
    ``(i + j) % stride == 0``) or ``"list"`` with explicit ``cells``.
    """
    n1, n2 = shape
    if spec == "full":
        mask = np.ones(shape, dtype=bool)
    elif spec == "random":
        if not 0 < fraction <= 1:
            raise InvalidInputError("fraction must lie in (0, 1]")
        count = max(1, int(round(fraction * n1 * n2)))
        pick = np.random.default_rng(seed).choice(n1 * n2, size=count, replace=False)
        mask = np.zeros(n1 * n2, dtype=bool)
        mask[pick] = True
        mask = mask.reshape(shape)
    elif spec == "stride":
        i, j = np.indices(shape)
        mask = (i + j) % int(stride) == 0
    elif spec == "list":
        mask = np.zeros(shape, dtype=bool)
        for i, j in cells or ():
            mask[int(i), int(j)] = True
    else:
        raise InvalidInputError(f"unknown interpolation set {spec!r}")
    if not mask.any():
        raise InvalidInputError("interpolation set is empty")
    return mask


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the alternating solver.

    ``phi_update`` selects how spectra are refit: ``"simplex"`` solves the
    nonnegative least-squares problem with every row constrained to sum to
    ``K`` (the normalization is part of the feasible set, so the update is
    exact), ``"nnls_normalize"`` solves the unconstrained-sum problem and
    then rescales rows to sum ``K``, folding the inverse scale into the
    fields and local models.

    ``init`` picks the starting spectra: ``"nmf"`` factorizes the
    sensor-by-band reading matrix, ``"uniform"`` starts from flat rows
    jittered by ``U(0, init_perturbation)`` when there are several sources.
    """

    nu: float = 1e-4
    mu: float = 0.01
    interp_set: str = "random"
    interp_fraction: float = 0.5
    interp_stride: int = 2
    interp_cells: tuple = ()
    max_outer: int = 30
    outer_tol: float = 1e-5
    svt: SvtConfig = field(default_factory=lambda: SvtConfig(max_iter=200, tol=1e-5))
    theta_ridge: float = 1e-10
    phi_update: str = "simplex"
    init: str = "nmf"
    init_perturbation: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.nu < 0 or self.mu < 0:
            raise InvalidInputError("nu and mu must be non-negative")
        if self.max_outer < 1 or not self.outer_tol > 0:
            raise InvalidInputError("max_outer and outer_tol must be positive")
        if self.theta_ridge < 0:
            raise InvalidInputError("theta_ridge must be non-negative")
        if self.phi_update not in ("simplex", "nnls_normalize"):
            raise InvalidInputError(f"unknown phi_update {self.phi_update!r}")
        if self.init not in ("nmf", "uniform"):
            raise InvalidInputError(f"unknown init {self.init!r}")
        if isinstance(self.svt, dict):
            object.__setattr__(self, "svt", SvtConfig(**self.svt))

    def mask(self, shape):
        return interpolation_mask(shape, self.interp_set, self.interp_fraction,
                                  self.interp_stride, self.interp_cells, self.seed)


@dataclass(frozen=True)
class Estimate:
    """Solver output. ``tensor_hat[i, j, k] = sum_r fields_hat[r, i, j] spectra_hat[r, k]``."""

    fields_hat: np.ndarray
    spectra_hat: np.ndarray
    tensor_hat: np.ndarray
    objective_trace: tuple
    converged: bool
    theta: np.ndarray | None = None
    cells: np.ndarray | None = None
    n_outer: int = 0


@dataclass
class _Problem:
    """Per-cell quantities that stay fixed during the alternation."""

    cells: np.ndarray  # flat indices of interpolated cells
    weight: np.ndarray  # (C, P) kernel weights
    index: np.ndarray  # (C, P) sensor indices
    design: np.ndarray  # (C, P, 6)
    readings: np.ndarray  # (M, K), zero where unobserved
    mask: np.ndarray  # (M, K) float 0/1
    grid_shape: tuple


def _build_problem(measurements, grid, kcfg, cell_mask):
    cells = np.flatnonzero(cell_mask.ravel())
    centers = grid.flat_centers()[cells]
    nb = kernel_weights(centers, measurements.locations, kcfg)
    pts = measurements.locations[nb.index]
    design = design_matrix(pts, centers[:, None, :], reduced=True)
    return _Problem(cells, nb.weight, nb.index, design, measurements.filled(),
                    measurements.band_mask.astype(float), grid.shape)


# --------------------------------------------------------------------------
# local model update
# --------------------------------------------------------------------------


def _theta_system(prob, phi, readings=None):
    """Normal matrices ``(C, 6R, 6R)`` and right-hand sides ``(C, 6R)``.

    ``readings`` may carry extra leading trial axes ``(..., M, K)``; the
    right-hand side then gets the same leading axes after the cell axis.
    """
    R = phi.shape[0]
    C, P = prob.weight.shape
    band_gram = np.einsum("mk,rk,sk->mrs", prob.mask, phi, phi)
    N = np.einsum("cm,cmrs,cmp,cmq->crpsq", prob.weight, band_gram[prob.index],
                  prob.design, prob.design, optimize=True)
    N = N.reshape(C, R * N_REDUCED, R * N_REDUCED)
    data = prob.readings if readings is None else readings
    proj = np.einsum("...mk,rk->...mr", data * prob.mask, phi)
    if proj.ndim == 2:
        rhs = np.einsum("cm,cmr,cmp->crp", prob.weight, proj[prob.index], prob.design)
        rhs = rhs.reshape(C, R * N_REDUCED)
    else:
        lead = proj.shape[:-2]
        flat = proj.reshape((-1,) + proj.shape[-2:])
        rhs = np.einsum("cm,tcmr,cmp->ctrp", prob.weight, flat[:, prob.index], prob.design)
        rhs = rhs.reshape((C,) + lead + (R * N_REDUCED,))
    return N, rhs


def _coupling(nu, R):
    e = np.zeros(R * N_REDUCED)
    e[::N_REDUCED] = nu
    return e


def _solve_local(N, rhs, ridge_scale, previous=None):
    """Batched solve with a ridge fallback on badly conditioned cells.

    Returns reduced coefficients ``(C, 6R)`` and a boolean array of cells
    that could not be solved even with the ridge.
    """
    C, n = rhs.shape
    evals = np.linalg.eigvalsh(N)
    ok = evals[:, 0] > _COND_FLOOR * np.maximum(evals[:, -1], np.finfo(float).tiny)
    out = np.zeros((C, n))
    if ok.any():
        out[ok] = np.linalg.solve(N[ok], rhs[ok][..., None])[..., 0]
    failed = np.zeros(C, dtype=bool)
    bad = np.flatnonzero(~ok)
    if bad.size:
        ridge = np.ones(n)
        ridge[::N_REDUCED] = 0.0
        for c in bad:
            scale = ridge_scale * np.trace(N[c]) / n
            Nc = N[c] + np.diag(ridge * scale)
            ev = np.linalg.eigvalsh(Nc)
            if scale > 0 and ev[0] > _COND_FLOOR * max(ev[-1], np.finfo(float).tiny):
                out[c] = np.linalg.solve(Nc, rhs[c])
            else:
                failed[c] = True
                if previous is not None:
                    out[c] = previous[c]
        n_ridge = bad.size - failed.sum()
        if n_ridge:
            log.debug("%d local systems needed a ridge", n_ridge)
        if failed.any():
            warnings.warn(f"{int(failed.sum())} cells have singular local systems and were skipped",
                          RuntimeWarning, stacklevel=3)
    return out, failed


def _update_theta_all(prob, phi, fields, nu, ridge, previous=None):
    R = phi.shape[0]
    N, rhs = _theta_system(prob, phi)
    if nu > 0:
        N = N + np.diag(_coupling(nu, R))[None]
        s_vals = fields.reshape(R, -1)[:, prob.cells].T  # (C, R)
        rhs = rhs.copy()
        rhs[:, ::N_REDUCED] += nu * s_vals
    prev = None if previous is None else previous.reshape(len(prob.cells), -1)
    theta, failed = _solve_local(N, rhs, ridge, prev)
    return theta.reshape(len(prob.cells), R, N_REDUCED), failed


def update_theta(center, phi, s_vals, measurements, weights, nu=0.0, ridge=0.0):
    """Closed-form local model of a single cell.

    Parameters
    ----------
    center : array, shape (2,)
    phi : array, shape (R, K)
    s_vals : array, shape (R,)
        Current field values at the cell, pulled towards by the ``nu`` term.
    measurements : MeasurementSet
    weights : array, shape (M,)
        Kernel weight of every sensor at this cell.
    nu, ridge : float

    Returns
    -------
    ndarray, shape (7 R,)
        Stacked coefficients, source-major: ``theta[7 r]`` is the constant
        term of source ``r``.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    weights = np.asarray(weights, dtype=float)
    M = measurements.n_sensors
    prob = _Problem(
        cells=np.array([0]),
        weight=weights[None, :],
        index=np.arange(M)[None, :],
        design=design_matrix(measurements.locations, center, reduced=True)[None],
        readings=measurements.filled(),
        mask=measurements.band_mask.astype(float),
        grid_shape=(1, 1),
    )
    R = phi.shape[0]
    fields = np.asarray(s_vals, dtype=float).reshape(R, 1, 1)
    theta, failed = _update_theta_all(prob, phi, fields, nu, ridge)
    if failed.any():
        raise np.linalg.LinAlgError("local normal matrix is singular")
    return expand_coefficients(theta[0]).ravel()


def assemble_normal_matrix(center, phi, measurements, weights):
    """Seven-column normal matrix ``sum_m kappa_m P_m kron x_m x_m^T``.

    ``P_m[r, s] = sum_k psi_mk phi_rk phi_sk``; rows and columns are ordered
    source-major, matching :func:`update_theta`.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    X = design_matrix(measurements.locations, center)
    P = np.einsum("mk,rk,sk->mrs", measurements.band_mask.astype(float), phi, phi)
    N = np.einsum("m,mrs,mp,mq->rpsq", np.asarray(weights, dtype=float), P, X, X)
    R = phi.shape[0]
    return N.reshape(R * N_COEF, R * N_COEF)


# --------------------------------------------------------------------------
# spectrum update
# --------------------------------------------------------------------------


def _local_predictions(prob, theta):
    # u[c, p, r]: source-r local model of cell c evaluated at its p-th neighbor
    return np.einsum("cpq,crq->cpr", prob.design, theta)


def _phi_gram(prob, theta):
    u = _local_predictions(prob, theta)
    M = prob.readings.shape[0]
    R = theta.shape[1]
    per_sensor = np.zeros((M, R, R))
    np.add.at(per_sensor, prob.index, prob.weight[..., None, None] * u[..., :, None] * u[..., None, :])
    lin = np.zeros((M, R))
    np.add.at(lin, prob.index, prob.weight[..., None] * u)
    G = np.einsum("mk,mrs->krs", prob.mask, per_sensor)
    h = np.einsum("mk,mr->kr", prob.mask * prob.readings, lin)
    return G, h


def _phi_from_gram(G, h, row_sum):
    K, R, _ = G.shape
    if not np.any(G):
        raise InvalidInputError("all-zero spectrum design")
    jitter = 1e-12 * np.maximum(np.trace(G, axis1=1, axis2=2), np.finfo(float).tiny) / R
    Gj = G + jitter[:, None, None] * np.eye(R)
    if row_sum is None:
        return np.stack([nnls_gram(Gj[k], h[k]) for k in range(K)], axis=1)
    # variables ordered source-major: index r * K + k
    big = np.zeros((R * K, R * K))
    for k in range(K):
        idx = np.arange(R) * K + k
        big[np.ix_(idx, idx)] = Gj[k]
    lin = h.T.ravel()
    groups = np.repeat(np.arange(R), K)
    x = nnls_gram_sum_constrained(big, lin, groups, np.full(R, float(row_sum)))
    return x.reshape(R, K)


def update_phi(theta, measurements, windows, row_sum=None):
    """Nonnegative least-squares refit of the spectra for fixed local models.

    Parameters
    ----------
    theta : array, shape (C, 7 R) or (C, R, 7)
        Local models of the cells in ``windows``.
    measurements : MeasurementSet
    windows : Neighborhoods
        Kernel windows of the same ``C`` cells, from :func:`kernel_weights`.
    row_sum : float, optional
        When given, every row of the result is constrained to sum to it.
        Otherwise each band is an independent NNLS problem.

    Returns
    -------
    ndarray, shape (R, K)
    """
    C = windows.index.shape[0]
    theta = np.asarray(theta, dtype=float).reshape(C, -1, N_COEF)
    if not np.any(windows.weight > 0):
        raise InvalidInputError("no cell has sensors in its window")
    pts = measurements.locations[windows.index]
    prob = _Problem(np.arange(C), windows.weight, windows.index,
                    design_matrix(pts, windows.centers[:, None, :], reduced=True),
                    measurements.filled(), measurements.band_mask.astype(float), (C, 1))
    G, h = _phi_gram(prob, reduce_coefficients(theta))
    return _phi_from_gram(G, h, row_sum)


# --------------------------------------------------------------------------
# field update
# --------------------------------------------------------------------------


def update_fields(alpha, cell_mask, mu, svt_cfg=None, init=None):
    """Low-rank completion of every source field from its local constants.

    Parameters
    ----------
    alpha : array, shape (R, n1, n2)
        Constant terms of the local models; only entries inside
        ``cell_mask`` are read.
    cell_mask : bool array, shape (n1, n2)
    mu : float
        Nuclear-norm weight.
    svt_cfg : SvtConfig, optional
        Iteration settings; its ``mu`` is overridden.
    init : array, shape (R, n1, n2), optional
        Warm start.

    Returns
    -------
    fields : ndarray, shape (R, n1, n2)
    converged : bool
    """
    alpha = np.asarray(alpha, dtype=float)
    cfg = replace(svt_cfg or SvtConfig(), mu=float(mu))
    out = np.empty_like(alpha)
    converged = True
    for r in range(alpha.shape[0]):
        res = svt_complete(ObservedMatrix(alpha[r], cell_mask), cfg,
                           None if init is None else init[r])
        out[r] = res.matrix
        converged &= res.converged
    return out, converged


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def _fit_term(prob, phi, theta):
    u = _local_predictions(prob, theta)  # (C, P, R)
    pred = np.einsum("cpr,rk->cpk", u, phi)
    resid = (prob.readings[prob.index] - pred) * prob.mask[prob.index]
    return float(np.sum(prob.weight[..., None] * resid * resid))


def _nuclear(fields):
    return np.array([np.linalg.svd(f, compute_uv=False).sum() for f in fields])


def _objective(prob, phi, theta, fields, nu, mu, nuclear=None):
    R = phi.shape[0]
    fit = _fit_term(prob, phi, theta)
    s_vals = fields.reshape(R, -1)[:, prob.cells].T
    coupling = float(np.sum((theta[..., 0] - s_vals) ** 2))
    nuc = _nuclear(fields) if nuclear is None else nuclear
    return fit + nu * coupling + nu * mu * float(np.sum(nuc))


def objective_value(measurements, grid, kcfg, cell_mask, phi, theta, fields, nu, mu):
    """Value of the three-term objective for a given state.

    ``theta`` has shape ``(C, R, 7)`` (or ``(C, 7 R)``) for the ``C`` cells
    of ``cell_mask`` in row-major order.
    """
    prob = _build_problem(measurements, grid, kcfg, np.asarray(cell_mask, dtype=bool))
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    theta = np.asarray(theta, dtype=float).reshape(len(prob.cells), phi.shape[0], N_COEF)
    return _objective(prob, phi, reduce_coefficients(theta), np.asarray(fields, dtype=float), nu, mu)


# --------------------------------------------------------------------------
# alternation
# --------------------------------------------------------------------------


def initial_spectra(n_sources, n_bands, perturbation=0.1, seed=0):
    """Uniform rows, jittered by ``U(0, perturbation)`` when there are several sources."""
    phi = np.ones((n_sources, n_bands))
    if n_sources > 1 and perturbation > 0:
        phi += np.random.default_rng(seed).uniform(0.0, perturbation, size=phi.shape)
    return phi * (n_bands / phi.sum(axis=1, keepdims=True))


def nmf_spectra(measurements, n_sources, seed=0):
    """Starting spectra from a masked NMF of the reading matrix.

    At the sensors the readings follow ``Gamma ~ rho @ Phi`` with
    nonnegative factors, so the right factor of a rank-``R`` nonnegative
    factorization is a spectrum estimate up to scale.
    """
    _, B = masked_nmf(measurements.filled(), measurements.band_mask, n_sources, seed=seed)
    K = measurements.n_bands
    B = B + 1e-9 * max(B.max(), np.finfo(float).tiny)
    return B * (K / B.sum(axis=1, keepdims=True))


def _fold_scale(phi, theta, fields):
    scale = phi.shape[1] / np.maximum(phi.sum(axis=1), np.finfo(float).tiny)
    return phi * scale[:, None], theta / scale[None, :, None], fields / scale[:, None, None]


def solve(measurements, grid, kcfg, cfg, n_sources, init=None):
    """Run the alternating solver.

    Parameters
    ----------
    measurements : MeasurementSet
    grid : Grid
    kcfg : KernelConfig
    cfg : SolverConfig
    n_sources : int
    init : dict, optional
        Optional ``"spectra"`` (``R x K``) and ``"fields"`` (``R x n1 x n2``)
        starting values.

    Returns
    -------
    Estimate
    """
    if not isinstance(grid, Grid):
        raise InvalidInputError("grid must be a Grid")
    R, K = int(n_sources), measurements.n_bands
    if R < 1:
        raise InvalidInputError("n_sources must be >= 1")
    cell_mask = cfg.mask(grid.shape)
    prob = _build_problem(measurements, grid, kcfg, cell_mask)
    init = init or {}
    if "spectra" in init:
        phi = np.asarray(init["spectra"], dtype=float)
    elif cfg.init == "nmf" and R > 1:
        phi = nmf_spectra(measurements, R, cfg.seed)
    else:
        phi = initial_spectra(R, K, cfg.init_perturbation, cfg.seed)
    phi = phi * (K / phi.sum(axis=1, keepdims=True))
    fields = np.array(init.get("fields", np.zeros((R,) + grid.shape)), dtype=float)
    nu, mu = cfg.nu, cfg.mu

    theta, failed = _update_theta_all(prob, phi, fields, 0.0, cfg.theta_ridge)
    if failed.all():
        raise SolverError("no cell has a solvable local system")
    nuclear = _nuclear(fields)
    f = _objective(prob, phi, theta, fields, nu, mu, nuclear)
    trace = [f]
    converged = False
    svt_ok = True

    def snapshot(n_outer, done):
        tensor = np.einsum("rij,rk->ijk", fields, phi)
        return Estimate(fields.copy(), phi.copy(), tensor, tuple(trace), done,
                        expand_coefficients(theta), prob.cells.copy(), n_outer)

    it = 0
    for it in range(1, cfg.max_outer + 1):
        f_start = f
        try:
            if it > 1:
                new_theta, _ = _update_theta_all(prob, phi, fields, nu, cfg.theta_ridge, theta)
                f_new = _objective(prob, phi, new_theta, fields, nu, mu, nuclear)
                if f_new <= f:
                    theta, f = new_theta, f_new

            G, h = _phi_gram(prob, theta)
            row_sum = K if cfg.phi_update == "simplex" else None
            new_phi = _phi_from_gram(G, h, row_sum)
            if cfg.phi_update == "nnls_normalize":
                if np.any(new_phi.sum(axis=1) <= 0):
                    raise SolverError("a source lost all spectral power", snapshot(it - 1, False))
                new_phi, new_theta, new_fields = _fold_scale(new_phi, theta, fields)
                phi, theta, fields = new_phi, new_theta, new_fields
                nuclear = _nuclear(fields)
                f = _objective(prob, phi, theta, fields, nu, mu, nuclear)
            else:
                f_new = _objective(prob, new_phi, theta, fields, nu, mu, nuclear)
                if f_new <= f:
                    phi, f = new_phi, f_new

            alpha = np.zeros((R, grid.n_cells))
            alpha[:, prob.cells] = theta[..., 0].T
            alpha = alpha.reshape((R,) + grid.shape)
            warm = fields if np.any(fields) else None
            new_fields, ok = update_fields(alpha, cell_mask, mu, cfg.svt, warm)
            new_nuclear = _nuclear(new_fields)
            f_new = _objective(prob, phi, theta, new_fields, nu, mu, new_nuclear)
            if f_new <= f:
                fields, nuclear, f = new_fields, new_nuclear, f_new
                svt_ok = ok
        except SolverError:
            raise
        except (np.linalg.LinAlgError, InvalidInputError, RuntimeError) as exc:
            raise SolverError(f"outer iteration {it} failed: {exc}", snapshot(it - 1, False)) from exc

        trace.append(f)
        change = (f_start - f) / max(abs(f_start), np.finfo(float).tiny)
        log.info("iteration %d objective %.10e relative change %.3e", it, f, change)
        if it > 1 and change < cfg.outer_tol:
            converged = True
            break
    return snapshot(it, converged and svt_ok)
