"""Closed-form variance predictions checked against Monte Carlo runs.

Every check uses one fixed sensor layout: ``n_sensors`` points drawn
uniformly in a square of side ``side`` centred on the examined cell, with
the adaptive Epanechnikov bandwidth covering ``min_neighbors`` sensors.
Trials redraw only the fading and the additive noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .analysis import (
    Scenario,
    monte_carlo_variance,
    predict_variance_lpr,
    predict_variance_lpr_exact,
    predict_variance_sparse,
    predict_variance_tensor,
    predict_variance_two_source,
    topology_constant,
    variance_gap,
)
from .numerics import InvalidInputError
from .solver import KernelConfig

__all__ = [
    "Check",
    "Topology",
    "check_gap",
    "check_sparse",
    "check_tensor",
    "check_two_source",
    "make_topology",
    "random_spectra",
    "two_source_layout",
    "validation_report",
]


@dataclass(frozen=True)
class Topology:
    sensors: np.ndarray
    cell: np.ndarray
    kcfg: KernelConfig
    c_const: float


@dataclass(frozen=True)
class Check:
    """One predicted-versus-empirical comparison."""

    name: str
    predicted: float
    empirical: float
    std_error: float
    passed: bool
    note: str = ""

    @property
    def relative_error(self):
        return abs(self.empirical - self.predicted) / abs(self.predicted)

    def line(self):
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: predicted {self.predicted:.6e} "
                f"empirical {self.empirical:.6e} +- {self.std_error:.2e} "
                f"(rel {self.relative_error:.3%}){' ' + self.note if self.note else ''}")

    def to_dict(self):
        d = asdict(self)
        d["relative_error"] = self.relative_error
        return d


def make_topology(n_sensors=30, side=10.0, min_neighbors=14, seed=0):
    """Random sensor layout around a cell at the origin."""
    rng = np.random.default_rng(seed)
    sensors = rng.uniform(-side / 2, side / 2, size=(n_sensors, 2))
    cell = np.zeros(2)
    kcfg = KernelConfig(min_neighbors=min_neighbors)
    topo = topology_constant(sensors, cell, kcfg)
    return Topology(sensors, cell, kcfg, topo.c_const)


def random_spectra(n, n_bands, seed=0, low=0.2, high=1.0):
    """``n`` strictly positive spectra, each summing to ``n_bands``."""
    rng = np.random.default_rng(seed)
    phi = rng.uniform(low, high, size=(n, n_bands))
    return phi * (n_bands / phi.sum(axis=1, keepdims=True))


def two_source_layout(eta, n_bands):
    """Unit-power spectra of two sources sharing ``eta * n_bands`` bands.

    Each source occupies ``(1 + eta) K / 2`` bands; the first source sits at
    the low end, the second at the high end.
    """
    own = (1 + eta) * n_bands / 2
    shared = eta * n_bands
    if abs(own - round(own)) > 1e-9 or abs(shared - round(shared)) > 1e-9:
        raise InvalidInputError("overlap ratio must give whole numbers of bands")
    own = int(round(own))
    phi = np.zeros((2, n_bands))
    phi[0, :own] = 1.0
    phi[1, n_bands - own:] = 1.0
    return phi


def _verdict(pred, mc, n_se, rel_tol):
    return abs(mc.variance - pred) <= n_se * mc.std_error and abs(mc.variance - pred) <= rel_tol * abs(pred)


def check_tensor(topo, n_bands=20, sigma_eta=0.1, sigma_eps=0.1, n_trials=100_000, seed=0,
                 n_se=3.0, rel_tol=0.05, spectrum=None):
    """Integrated single-source interpolator against its closed form."""
    phi = np.ones(n_bands) if spectrum is None else np.asarray(spectrum, dtype=float)
    scn = Scenario(topo.sensors, topo.cell, phi[None, :], sigma_eta, sigma_eps, topo.kcfg)
    mc = monte_carlo_variance(scn, "integrated", n_trials, seed)
    pred = predict_variance_tensor(phi, sigma_eta, sigma_eps, topo.c_const)
    return Check("integrated variance", pred, mc.variance, mc.std_error, _verdict(pred, mc, n_se, rel_tol))


def check_gap(topo, phi, sigma_eta=0.1, sigma_eps=0.1, n_trials=100_000, seed=0, n_se=3.0, rel_tol=0.05):
    """Band-by-band variance and its excess over the integrated interpolator.

    Both estimators see the same noise draws. Returns four checks: the
    band-by-band variance against its closed form, the empirical gap against
    the predicted gap, and two informational checks of the same quantities
    against the exact band-average variance.
    """
    phi = np.asarray(phi, dtype=float)
    scn = Scenario(topo.sensors, topo.cell, phi[None, :], sigma_eta, sigma_eps, topo.kcfg)
    mc_p = monte_carlo_variance(scn, "lpr", n_trials, seed)
    mc_t = monte_carlo_variance(scn, "integrated", n_trials, seed)
    pred_p = predict_variance_lpr(phi, sigma_eta, sigma_eps, topo.c_const)
    exact_p = predict_variance_lpr_exact(phi, sigma_eta, sigma_eps, topo.c_const)
    gap, _, _ = variance_gap(phi, sigma_eta, sigma_eps, topo.c_const)
    exact_gap = exact_p - predict_variance_tensor(phi, sigma_eta, sigma_eps, topo.c_const)
    emp_gap = mc_p.variance - mc_t.variance
    se_gap = float(np.hypot(mc_p.std_error, mc_t.std_error))
    return (
        Check("band-by-band variance", pred_p, mc_p.variance, mc_p.std_error,
              _verdict(pred_p, mc_p, n_se, rel_tol)),
        Check("variance gap", gap, emp_gap, se_gap,
              emp_gap >= 0 and abs(emp_gap - gap) <= n_se * se_gap),
        Check("band-by-band variance (exact average)", exact_p, mc_p.variance, mc_p.std_error,
              _verdict(exact_p, mc_p, n_se, rel_tol), note="informational"),
        Check("variance gap (exact average)", exact_gap, emp_gap, se_gap,
              emp_gap >= 0 and abs(emp_gap - exact_gap) <= n_se * se_gap, note="informational"),
    )


def check_sparse(topo, k_primes=(5, 10, 20), n_bands=20, sigma_eta=0.1, sigma_eps=0.1,
                 n_trials=100_000, seed=0, rel_tol=0.05):
    """Variance ratios when each sensor observes ``k'`` random bands.

    Ratios are taken against the largest ``k'``.
    """
    rng = np.random.default_rng(seed)
    phi = np.ones((1, n_bands))
    results = {}
    for kp in k_primes:
        mask = np.zeros((topo.sensors.shape[0], n_bands), dtype=bool)
        for m in range(mask.shape[0]):
            mask[m, rng.choice(n_bands, size=kp, replace=False)] = True
        scn = Scenario(topo.sensors, topo.cell, phi, sigma_eta, sigma_eps, topo.kcfg, band_mask=mask)
        results[kp] = (monte_carlo_variance(scn, "integrated", n_trials, seed + kp),
                       predict_variance_sparse(kp, sigma_eta, sigma_eps, topo.c_const, n_bands))
    ref = max(k_primes)
    checks = []
    for kp in k_primes:
        mc, pred = results[kp]
        mc_ref, pred_ref = results[ref]
        ratio_emp = mc.variance / mc_ref.variance
        ratio_pred = pred / pred_ref
        se = ratio_emp * float(np.hypot(mc.std_error / mc.variance, mc_ref.std_error / mc_ref.variance))
        checks.append(Check(f"sparse ratio k'={kp}/{ref}", ratio_pred, ratio_emp, se,
                            abs(ratio_emp - ratio_pred) <= rel_tol * ratio_pred))
    return checks


def check_two_source(topo, eta, n_bands=20, sigma_eta=0.1, sigma_eps=0.1, n_trials=100_000, seed=0,
                     rel_tol=0.05):
    """Joint two-source interpolator against the overlap closed form."""
    phi = two_source_layout(eta, n_bands)
    scn = Scenario(topo.sensors, topo.cell, phi, sigma_eta, sigma_eps, topo.kcfg)
    mc = monte_carlo_variance(scn, "two_source", n_trials, seed, source=0)
    pred, _, _ = predict_variance_two_source(eta, n_bands, sigma_eta, sigma_eps, topo.c_const)
    return Check(f"two-source variance eta={eta}", pred, mc.variance, mc.std_error,
                 abs(mc.variance - pred) <= rel_tol * pred)


def validation_report(n_trials=100_000, seed=0, n_bands=20, sigma_eta=0.1, sigma_eps=0.1, n_spectra=10):
    """Run every check on the reference layout; returns a list of :class:`Check`."""
    topo = make_topology(seed=seed)
    checks = [check_tensor(topo, n_bands, sigma_eta, sigma_eps, n_trials, seed)]
    for i, phi in enumerate(random_spectra(n_spectra, n_bands, seed)):
        for c in check_gap(topo, phi, sigma_eta, sigma_eps, n_trials, seed + 1 + i):
            checks.append(Check(f"{c.name} [spectrum {i}]", c.predicted, c.empirical, c.std_error,
                                c.passed, c.note))
    checks += check_sparse(topo, (5, 10, 20), n_bands, sigma_eta, sigma_eps, n_trials, seed)
    for eta in (0.0, 0.2, 0.5):
        checks.append(check_two_source(topo, eta, n_bands, sigma_eta, sigma_eps, n_trials, seed))
    return checks
