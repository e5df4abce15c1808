"""Synthetic propagation fields, source spectra and sensor measurements.

A scene holds ``R`` sources. Source ``r`` has a large-scale propagation
field ``rho_r(z)`` (path gain plus optional log-normal shadowing) and a
nonnegative power spectrum ``phi_r`` over ``K`` bands whose entries sum to
``K``. The power spectrum map is the tensor
``H[i, j, k] = sum_r rho_r(c_ij) * phi_r[k]`` on the cell centers ``c_ij``.

Random streams
--------------
``generate_scene`` derives four independent child streams from
``SeedSequence(cfg.rng_seed)``: source placement, spectra, shadowing and
measurements, in that order. Every draw inside a stream happens in a fixed
order regardless of which options are active, so toggling e.g. ``on_grid``
leaves the sensor layout and the noise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg

from .grid import Grid
from .numerics import InvalidInputError

__all__ = [
    "FieldSampler",
    "GroundTruth",
    "MeasurementSet",
    "SamplingPlan",
    "SceneConfig",
    "assemble_tensor",
    "generate_field",
    "generate_scene",
    "generate_spectrum",
    "sample_measurements",
    "sinc2_spectrum",
]

MAX_GP_POINTS = 4000


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the generative world.

    ``path_model`` selects the path gain ``g(d)``:

    * ``"friis"``: ``tx_power_w * (friis_c0 / d) ** 2``
    * ``"exp"``: ``path_alpha * exp(-d ** path_beta)``
    * ``"log"``: ``path_alpha - path_beta * log10(d)``

    with ``d = sqrt(|z - s|^2 + source_height_m^2)``.

    Shadowing is a zero-mean Gaussian process with covariance
    ``shadow_sigma**2 * exp(-dist / shadow_corr_dist_m)``. With
    ``shadow_mode="db"`` the draw ``X`` is in decibels and multiplies the path
    gain, ``rho = g * 10 ** (X / 10)``. With ``"log10_additive"`` the draw is
    ``log10(zeta)`` and ``rho = g + 10 ** X``.

    ``snr_db=None`` disables the additive reading noise. Otherwise its
    standard deviation is ``ref * 10 ** (-snr_db / 20)`` where ``ref`` is 1
    (``snr_reference="unit"``) or the root-mean-square of the noiseless
    tensor (``"mean_power"``).
    """

    area_side_m: float = 50.0
    n1: int = 31
    n2: int = 31
    n_sources: int = 2
    n_bands: int = 20
    tx_power_w: float = 1.0
    friis_c0: float = 2.0
    source_height_m: float = 2.0
    shadow_sigma: float = 0.0
    shadow_corr_dist_m: float = 30.0
    sigma_eta: float = 0.0
    snr_db: float | None = None
    rng_seed: int = 0
    path_model: str = "friis"
    path_alpha: float = 1.0
    path_beta: float = 1.5
    area_origin: str = "corner"
    source_placement: str = "random"
    shadow_mode: str = "db"
    snr_reference: str = "unit"
    spectrum_model: str = "sinc2"
    overlap_eta: float = 0.0
    sinc_argument: str = "scaled"

    def __post_init__(self):
        positive = ["area_side_m", "tx_power_w", "friis_c0", "shadow_corr_dist_m"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("n1", "n2", "n_sources", "n_bands"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("source_height_m", "shadow_sigma", "sigma_eta"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if self.rng_seed < 0:
            raise InvalidInputError("rng_seed must be unsigned")
        choices = {
            "path_model": ("friis", "exp", "log"),
            "area_origin": ("corner", "centered"),
            "source_placement": ("random", "origin"),
            "shadow_mode": ("db", "log10_additive"),
            "snr_reference": ("mean_power", "unit"),
            "spectrum_model": ("sinc2", "overlap", "flat"),
            "sinc_argument": ("scaled", "literal"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise InvalidInputError(f"{name} must be one of {allowed}")
        if not 0 <= self.overlap_eta <= 1:
            raise InvalidInputError("overlap_eta must lie in [0, 1]")

    @property
    def grid(self):
        half = self.area_side_m / 2 if self.area_origin == "centered" else 0.0
        return Grid(int(self.n1), int(self.n2), float(self.area_side_m), -half, -half)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown scene parameters: {sorted(unknown)}")
        return cls(**data)

    def path_gain(self, dist):
        d = np.asarray(dist, dtype=float)
        if self.path_model == "friis":
            return self.tx_power_w * (self.friis_c0 / d) ** 2
        if self.path_model == "exp":
            return self.path_alpha * np.exp(-(d ** self.path_beta))
        return self.path_alpha - self.path_beta * np.log10(d)


@dataclass(frozen=True)
class SamplingPlan:
    """How sensors and observed bands are drawn.

    Give either ``n_sensors`` or ``rate`` (sensors per grid cell). Band
    schemes: ``"full"`` observes all bands, ``"uniform"`` picks
    ``bands_per_sensor`` bands uniformly without replacement, ``"weighted"``
    splits the sensors in two halves; the first half draws the lower half of
    the bands with weight 1 and the upper half with weight ``weight``, the
    second half the other way round.
    """

    n_sensors: int | None = None
    rate: float | None = None
    on_grid: bool = False
    band_scheme: str = "full"
    bands_per_sensor: int | None = None
    weight: float = 1.0

    def __post_init__(self):
        if (self.n_sensors is None) == (self.rate is None):
            raise InvalidInputError("give exactly one of n_sensors and rate")
        if self.n_sensors is not None and self.n_sensors < 1:
            raise InvalidInputError("n_sensors must be >= 1")
        if self.rate is not None and not self.rate > 0:
            raise InvalidInputError("rate must be positive")
        if self.band_scheme not in ("full", "uniform", "weighted"):
            raise InvalidInputError(f"unknown band scheme {self.band_scheme!r}")
        if self.band_scheme != "full" and (self.bands_per_sensor or 0) < 1:
            raise InvalidInputError("bands_per_sensor must be >= 1")
        if not self.weight > 0:
            raise InvalidInputError("weight must be positive")

    def sensor_count(self, grid):
        if self.n_sensors is not None:
            return int(self.n_sensors)
        return max(1, int(round(self.rate * grid.n_cells)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class FieldSampler:
    """Propagation field of one source, on the grid and at arbitrary points.

    The grid values are fixed at construction. Off-grid evaluations of the
    shadowing are drawn from the Gaussian process conditioned on the grid
    draw, so joint statistics are exact. Points that coincide with a cell
    center return the grid value itself.
    """

    def __init__(self, cfg, source, shadow_grid, chol):
        self.cfg = cfg
        self.source = np.asarray(source, dtype=float)
        self.grid = cfg.grid
        self._shadow_grid = shadow_grid
        self._chol = chol
        self.values = self._combine(self._gain(self.grid.flat_centers()), shadow_grid)
        self.values = self.values.reshape(self.grid.shape)

    def _gain(self, points):
        d2 = np.sum((points - self.source) ** 2, axis=1) + self.cfg.source_height_m ** 2
        return self.cfg.path_gain(np.sqrt(d2))

    def _combine(self, gain, shadow):
        if shadow is None:
            return gain
        if self.cfg.shadow_mode == "db":
            return gain * 10.0 ** (shadow / 10.0)
        return gain + 10.0 ** shadow

    def evaluate(self, points, rng):
        """Field value at ``points`` (shape ``(P, 2)``)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        gain = self._gain(points)
        if self._shadow_grid is None:
            return gain
        centers = self.grid.flat_centers()
        cell = self.grid.cell_of(points)
        exact = np.all(points == centers[cell], axis=1)
        shadow = np.empty(len(points))
        shadow[exact] = self._shadow_grid[cell[exact]]
        off = np.flatnonzero(~exact)
        if off.size:
            if off.size + centers.shape[0] > MAX_GP_POINTS:
                raise InvalidInputError("too many points for an exact Gaussian process draw")
            cross = _exp_cov(points[off], centers, self.cfg)
            solved = scipy.linalg.cho_solve(self._chol, cross.T)
            mean = solved.T @ self._shadow_grid
            cov = _exp_cov(points[off], points[off], self.cfg) - cross @ solved
            shadow[off] = mean + _gaussian_draw(0.5 * (cov + cov.T), rng, self.cfg)
        return self._combine(gain, shadow)


def _exp_cov(a, b, cfg):
    dist = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    return cfg.shadow_sigma ** 2 * np.exp(-dist / cfg.shadow_corr_dist_m)


def _factor(cov, cfg):
    try:
        return scipy.linalg.cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * cfg.shadow_sigma ** 2 * np.eye(cov.shape[0])
        try:
            return scipy.linalg.cho_factor(cov + jitter, lower=True)
        except np.linalg.LinAlgError as exc:
            raise InvalidInputError("shadowing covariance is not positive definite") from exc


def _gaussian_draw(cov, rng, cfg):
    # conditional covariances can be numerically semidefinite; fall back to eigh
    z = rng.standard_normal(cov.shape[0])
    try:
        L = np.linalg.cholesky(cov + 1e-10 * cfg.shadow_sigma ** 2 * np.eye(cov.shape[0]))
        return L @ z
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v @ (np.sqrt(np.maximum(w, 0.0)) * z)


def generate_field(cfg, source, rng):
    """Draw the propagation field of a source located at ``source``.

    Returns a :class:`FieldSampler`; ``sampler.values`` is the ``n1 x n2``
    matrix of cell-center values.
    """
    if cfg.shadow_sigma == 0:
        return FieldSampler(cfg, source, None, None)
    centers = cfg.grid.flat_centers()
    if centers.shape[0] > MAX_GP_POINTS:
        raise InvalidInputError("grid too large for an exact Gaussian process draw")
    chol = _factor(_exp_cov(centers, centers, cfg), cfg)
    z = rng.standard_normal(centers.shape[0])
    draw = np.tril(chol[0]) @ z
    return FieldSampler(cfg, source, draw, chol)


def sinc2_spectrum(n_bands, amplitudes, centers, widths, argument="scaled"):
    """Unnormalized mixture ``sum_i a_i sinc^2((k - f_i) / b_i)`` for ``k = 1..K``.

    ``argument="literal"`` evaluates ``sinc^2(k - f_i / b_i)`` instead.
    """
    k = np.arange(1, n_bands + 1, dtype=float)
    out = np.zeros(n_bands)
    for a, f, b in zip(amplitudes, centers, widths):
        x = (k - f) / b if argument == "scaled" else k - f / b
        out += a * np.sinc(x) ** 2
    return out


def _normalize_rows(phi):
    total = phi.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise InvalidInputError("spectrum row has no power")
    return phi * (phi.shape[1] / total)


def overlap_layout(n_bands, eta):
    """Occupancy of two sources sharing ``eta * K`` of ``K`` bands.

    Source 0 occupies the first ``(1 + eta) K / 2`` bands and source 1 the
    last ``(1 + eta) K / 2``. Returns a 0/1 matrix of shape ``(2, K)``.
    """
    shared = eta * n_bands
    own = (1 + eta) * n_bands / 2
    if abs(shared - round(shared)) > 1e-9 or abs(own - round(own)) > 1e-9:
        raise InvalidInputError("eta * K and (1 + eta) * K / 2 must be integers")
    own = int(round(own))
    occ = np.zeros((2, n_bands))
    occ[0, :own] = 1.0
    occ[1, n_bands - own:] = 1.0
    return occ


def generate_spectrum(cfg, rng):
    """Draw the ``R x K`` spectrum matrix; each row sums to ``K``."""
    R, K = cfg.n_sources, cfg.n_bands
    if cfg.spectrum_model == "flat":
        return np.ones((R, K))
    if cfg.spectrum_model == "overlap":
        if R != 2:
            raise InvalidInputError("the overlap spectrum needs exactly two sources")
        return _normalize_rows(overlap_layout(K, cfg.overlap_eta))
    if K < 2:
        raise InvalidInputError("sinc^2 spectra need at least two bands")
    rows = []
    for _ in range(R):
        a = rng.uniform(0.5, 2.0, size=2)
        f = rng.integers(1, K + 1, size=2)
        b = rng.uniform(2.0, 4.0, size=2)
        rows.append(sinc2_spectrum(K, a, f, b, cfg.sinc_argument))
    return _normalize_rows(np.array(rows))


def assemble_tensor(fields, spectra):
    """``H[i, j, k] = sum_r fields[r][i, j] * spectra[r, k]``."""
    F = np.asarray(fields, dtype=float)
    P = np.asarray(spectra, dtype=float)
    if F.ndim != 3 or P.ndim != 2 or F.shape[0] != P.shape[0]:
        raise InvalidInputError("fields must be (R, n1, n2) and spectra (R, K)")
    H = np.zeros(F.shape[1:] + (P.shape[1],))
    # accumulate source by source so the sum order is fixed
    for r in range(F.shape[0]):
        H += F[r][:, :, None] * P[r][None, None, :]
    return H


@dataclass(frozen=True)
class GroundTruth:
    fields: np.ndarray
    spectra: np.ndarray
    tensor: np.ndarray
    source_locations: np.ndarray
    samplers: tuple = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class MeasurementSet:
    """Sensor readings. ``readings`` is NaN where ``band_mask`` is False."""

    locations: np.ndarray
    band_mask: np.ndarray
    readings: np.ndarray
    on_grid: bool = False

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        mask = np.asarray(self.band_mask, dtype=bool)
        vals = np.asarray(self.readings, dtype=float)
        if loc.ndim != 2 or loc.shape[1] != 2:
            raise InvalidInputError("locations must have shape (M, 2)")
        if mask.shape != vals.shape or mask.shape[0] != loc.shape[0]:
            raise InvalidInputError("band_mask and readings must be (M, K)")
        if not np.all(np.isfinite(loc)):
            raise InvalidInputError("locations must be finite")
        if not np.all(mask.any(axis=1)):
            raise InvalidInputError("every sensor must observe at least one band")
        if not np.all(np.isfinite(vals[mask])):
            raise InvalidInputError("observed readings must be finite")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "band_mask", mask)
        object.__setattr__(self, "readings", np.where(mask, vals, np.nan))

    @property
    def n_sensors(self):
        return self.locations.shape[0]

    @property
    def n_bands(self):
        return self.band_mask.shape[1]

    def filled(self):
        """Readings with unobserved entries set to zero."""
        return np.where(self.band_mask, self.readings, 0.0)


def _band_masks(plan, M, K, rng):
    if plan.band_scheme == "full":
        return np.ones((M, K), dtype=bool)
    kp = plan.bands_per_sensor
    if kp > K:
        raise InvalidInputError("bands_per_sensor exceeds the number of bands")
    mask = np.zeros((M, K), dtype=bool)
    if plan.band_scheme == "uniform":
        for m in range(M):
            mask[m, rng.choice(K, size=kp, replace=False)] = True
        return mask
    low = np.arange(K) < K // 2
    w_first = np.where(low, 1.0, plan.weight)
    w_second = np.where(low, plan.weight, 1.0)
    for m in range(M):
        w = w_first if m < M // 2 else w_second
        mask[m, rng.choice(K, size=kp, replace=False, p=w / w.sum())] = True
    return mask


def noise_std(cfg, tensor):
    """Standard deviation of the additive reading noise."""
    if cfg.snr_db is None:
        return 0.0
    ref = 1.0 if cfg.snr_reference == "unit" else float(np.sqrt(np.mean(tensor ** 2)))
    return ref * 10.0 ** (-cfg.snr_db / 20.0)


def sample_measurements(gt, cfg, plan, rng):
    """Draw sensors, observed bands and noisy readings.

    Per observed ``(m, k)`` the reading is
    ``sum_r (rho_r(z_m) + eta_mrk) * phi_rk + eps_mk`` with independent
    ``eta ~ N(0, sigma_eta^2)`` and ``eps ~ N(0, sigma_eps^2)``.
    """
    grid = cfg.grid
    M = plan.sensor_count(grid)
    K = cfg.n_bands
    R = cfg.n_sources
    if gt.spectra.shape != (R, K):
        raise InvalidInputError("ground truth does not match the configuration")
    raw = np.column_stack([
        grid.x0 + rng.uniform(0.0, grid.side, size=M),
        grid.y0 + rng.uniform(0.0, grid.side, size=M),
    ])
    loc = grid.snap(raw) if plan.on_grid else raw
    mask = _band_masks(plan, M, K, rng)
    shadow_rngs = rng.spawn(R)
    rho = np.stack([gt.samplers[r].evaluate(loc, shadow_rngs[r]) for r in range(R)])
    eta = rng.standard_normal((M, R, K)) * cfg.sigma_eta
    eps = rng.standard_normal((M, K)) * noise_std(cfg, gt.tensor)
    clean = np.zeros((M, K))
    for r in range(R):
        clean += (rho[r][:, None] + eta[:, r, :]) * gt.spectra[r][None, :]
    readings = np.where(mask, clean + eps, np.nan)
    return MeasurementSet(loc, mask, readings, bool(plan.on_grid))


def _source_locations(cfg, rng):
    grid = cfg.grid
    draws = rng.uniform(0.0, grid.side, size=(cfg.n_sources, 2))
    if cfg.source_placement == "origin":
        return np.zeros((cfg.n_sources, 2))
    return draws + np.array([grid.x0, grid.y0])


def generate_ground_truth(cfg, rngs=None):
    """Fields, spectra and tensor; ``rngs`` is (placement, spectra, shadowing)."""
    if rngs is None:
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.rng_seed).spawn(4)[:3]]
    sources = _source_locations(cfg, rngs[0])
    spectra = generate_spectrum(cfg, rngs[1])
    samplers = tuple(generate_field(cfg, sources[r], rngs[2]) for r in range(cfg.n_sources))
    fields_ = np.stack([s.values for s in samplers])
    return GroundTruth(fields_, spectra, assemble_tensor(fields_, spectra), sources, samplers)


def generate_scene(cfg, plan):
    """Ground truth and measurements, fully determined by ``cfg.rng_seed``."""
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in seeds]
    gt = generate_ground_truth(cfg, rngs[:3])
    return gt, sample_measurements(gt, cfg, plan, rngs[3])


def off_grid_sensor_count(n, factor=2.0):
    """``factor * n * log(n)^2`` sensors, rounded."""
    return int(round(factor * n * math.log(n) ** 2))
