import numpy as np
import pytest

from specmap.analysis import (
    FormulaError,
    Scenario,
    monte_carlo_variance,
    predict_all,
    predict_variance_lpr,
    predict_variance_lpr_exact,
    predict_variance_sparse,
    predict_variance_tensor,
    predict_variance_two_source,
    spectrum_coefficients,
    topology_constant,
    two_source_coefficients,
    variance_gap,
)
from specmap.numerics import DegenerateProblemError, InvalidInputError
from specmap.solver import KernelConfig


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


def test_uniform_spectrum_coefficients():
    w_eta, w_eps = spectrum_coefficients(np.ones(20))
    assert w_eta == pytest.approx(1 / 20) and w_eps == pytest.approx(1 / 20)
    assert predict_variance_tensor(np.ones(20), 0.3, 0.2, 2.0) == pytest.approx((0.09 + 0.04) * 2.0 / 20)


def test_one_hot_spectrum_coefficients():
    phi = np.zeros(20)
    phi[3] = 20.0
    w_eta, w_eps = spectrum_coefficients(phi)
    assert w_eta == pytest.approx(1.0) and w_eps == pytest.approx(1 / 400)


def test_small_spectrum_example():
    phi = np.array([2.0, 1.0, 1.0, 1.0])
    w_eta, w_eps = spectrum_coefficients(phi)
    assert w_eta == pytest.approx(19 / 49, rel=1e-14)
    assert w_eps == pytest.approx(1 / 7, rel=1e-14)
    assert predict_variance_tensor(phi, 1.0, 1.0, 1.0) == pytest.approx(19 / 49 + 1 / 7)
    assert predict_variance_lpr(phi, 0.0, 1.0, 1.0) == pytest.approx(13 / 16, rel=1e-14)


def test_coefficient_bounds_on_random_spectra():
    rng = np.random.default_rng(0)
    K = 20
    for _ in range(10_000):
        phi = rng.dirichlet(np.ones(K)) * K
        w_eta, w_eps = spectrum_coefficients(phi)
        assert 1 / K - 1e-12 <= w_eta <= 1 + 1e-12
        assert 1 / K ** 2 - 1e-12 <= w_eps <= 1 / K + 1e-12


def test_spectrum_coefficients_reject_bad_input():
    with pytest.raises(InvalidInputError):
        spectrum_coefficients(np.zeros(4))
    with pytest.raises(InvalidInputError):
        spectrum_coefficients(np.array([1.0, -1.0]))


def test_asymptotic_limits():
    C = 3.0
    assert predict_variance_tensor(np.ones(10), 0.5, 0.0, C) == pytest.approx(C * 0.25 / 10)
    phi = np.zeros(10)
    phi[0] = 10
    assert predict_variance_tensor(phi, 0.0, 0.5, C) == pytest.approx(C * 0.25 / 100)


def test_lpr_closed_form_cases():
    assert predict_variance_lpr(np.ones(20), 0.3, 0.2, 1.5) == pytest.approx((0.09 + 0.04) * 1.5)
    phi = np.array([1.0])
    assert predict_variance_lpr(phi, 0.3, 0.2, 1.5) == pytest.approx(predict_variance_tensor(phi, 0.3, 0.2, 1.5))
    with pytest.raises(InvalidInputError):
        predict_variance_lpr(np.array([1.0, 0.0]), 0.1, 0.1, 1.0)


def test_exact_band_average_is_smaller_by_band_count():
    phi = np.array([2.0, 1.0, 1.0])
    assert predict_variance_lpr_exact(phi, 0.1, 0.2, 1.0) == pytest.approx(
        predict_variance_lpr(phi, 0.1, 0.2, 1.0) / 3)


def test_gap_uniform_spectrum():
    gap, s_eta, s_eps = variance_gap(np.ones(20), 1.0, 1.0, 1.0)
    assert s_eta == pytest.approx(19 / 20) and s_eps == pytest.approx(19 / 20)
    assert gap == pytest.approx(2 * 19 / 20)


def test_gap_near_one_hot():
    phi = np.full(20, 1e-4)
    phi[0] = 20.0
    _, s_eta, _ = variance_gap(phi, 1.0, 1.0, 1.0)
    assert s_eta < 1e-8


def test_gap_identity_on_random_spectra():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        K = int(rng.integers(2, 30))
        phi = rng.uniform(0.01, 1.0, K)
        phi *= K / phi.sum()
        gap, _, _ = variance_gap(phi, 0.3, 0.7, 1.3)
        direct = predict_variance_lpr(phi, 0.3, 0.7, 1.3) - predict_variance_tensor(phi, 0.3, 0.7, 1.3)
        assert gap >= 0
        assert gap == pytest.approx(direct, rel=1e-12, abs=1e-14)


def test_sparse_variance():
    assert predict_variance_sparse(10, 1.0, 1.0, 2.0, 20) == pytest.approx(0.4)
    assert predict_variance_sparse(1, 0.3, 0.4, 1.0) == pytest.approx(0.25)
    assert predict_variance_sparse(20, 0.3, 0.4, 1.0, 20) == pytest.approx(
        predict_variance_tensor(np.ones(20), 0.3, 0.4, 1.0))
    with pytest.raises(InvalidInputError):
        predict_variance_sparse(21, 1, 1, 1, 20)
    with pytest.raises(InvalidInputError):
        predict_variance_sparse(0, 1, 1, 1, 20)


def test_two_source_coefficients():
    assert two_source_coefficients(0.0, 20) == (0.1, 0.1)
    w_eta, w_eps = two_source_coefficients(0.5, 20)
    assert w_eta == pytest.approx(0.136, rel=1e-12)
    assert w_eps == pytest.approx(0.12, rel=1e-12)
    big = two_source_coefficients(0.99, 20)
    mid = two_source_coefficients(0.9, 20)
    assert big[0] > mid[0] > w_eta and big[1] > mid[1] > w_eps
    with pytest.raises(InvalidInputError):
        two_source_coefficients(1.0, 20)


def test_two_source_coefficient_shapes():
    etas = np.linspace(0, 0.999, 2000)
    coeffs = np.array([two_source_coefficients(e, 20) for e in etas])
    # the fading coefficient grows monotonically from 2/K
    assert np.all(np.diff(coeffs[:, 0]) >= -1e-12)
    assert np.all(coeffs[:, 0] >= 0.1 - 1e-12)
    # the noise coefficient first dips below 2/K, then grows without bound
    low = int(np.argmin(coeffs[:, 1]))
    assert etas[low] == pytest.approx(0.155, abs=0.01)
    assert coeffs[low, 1] == pytest.approx(2 * (1 + 0.1547) / (20 * (1 + 2 * 0.1547 - 3 * 0.1547 ** 2)), rel=1e-3)
    assert np.all(np.diff(coeffs[low:, 1]) >= -1e-12)
    assert coeffs[-1, 1] > 1.0


def test_predict_all_is_consistent():
    phi = np.array([2.0, 1.0, 0.5, 0.5])
    out = predict_all(phi, 0.2, 0.3, 1.7, k_prime=2, eta=0.5)
    assert out.gap == pytest.approx(out.e_p - out.e_t)
    assert out.e_m == predict_variance_two_source(0.5, 4, 0.2, 0.3, 1.7)[0]


def test_formula_error_is_assertion():
    assert issubclass(FormulaError, AssertionError)


# --------------------------------------------------------------------------
# topology
# --------------------------------------------------------------------------


def test_symmetric_layout_has_vanishing_odd_moments():
    ring = np.array([[np.cos(t), np.sin(t)] for t in np.linspace(0, 2 * np.pi, 8, endpoint=False)])
    sensors = np.vstack([ring, 2 * ring, [[0.0, 0.0]]])
    topo = topology_constant(sensors, np.zeros(2), KernelConfig(bandwidth=3.0))
    np.testing.assert_allclose(topo.a1[0, 1:3], 0.0, atol=1e-12)
    np.testing.assert_allclose(topo.a1, topo.a1.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(topo.a1) >= -1e-10)
    assert np.all(np.linalg.eigvalsh(topo.a2) >= -1e-10)
    assert topo.c_const > 0


def test_clustered_layout_is_degenerate():
    sensors = np.tile([[1.0, 2.0]], (20, 1))
    with pytest.raises(DegenerateProblemError) as err:
        topology_constant(sensors, np.zeros(2), KernelConfig(bandwidth=5.0))
    assert "singular" in str(err.value)


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def layout():
    rng = np.random.default_rng(0)
    sensors = rng.uniform(-5, 5, size=(30, 2))
    kcfg = KernelConfig(min_neighbors=14)
    return sensors, kcfg, topology_constant(sensors, np.zeros(2), kcfg).c_const


def test_noise_free_trials_have_zero_variance(layout):
    sensors, kcfg, _ = layout
    scn = Scenario(sensors, np.zeros(2), np.ones((1, 4)), 0.0, 0.0, kcfg)
    mc = monte_carlo_variance(scn, "integrated", 200, 0)
    assert mc.variance == pytest.approx(0.0, abs=1e-24)


def test_topology_constant_matches_pure_noise_monte_carlo(layout):
    sensors, kcfg, c = layout
    scn = Scenario(sensors, np.zeros(2), np.ones((1, 1)), 0.0, 1.0, kcfg)
    mc = monte_carlo_variance(scn, "integrated", 100_000, 1)
    assert abs(mc.variance - c) <= 0.05 * c


def test_two_source_variance_monte_carlo(layout):
    from specmap.validation import two_source_layout

    sensors, kcfg, c = layout
    scn = Scenario(sensors, np.zeros(2), two_source_layout(0.4, 20), 0.1, 0.1, kcfg)
    mc = monte_carlo_variance(scn, "two_source", 100_000, 2)
    pred, _, _ = predict_variance_two_source(0.4, 20, 0.1, 0.1, c)
    assert abs(mc.variance - pred) <= 0.05 * pred


def test_monte_carlo_is_reproducible(layout):
    sensors, kcfg, _ = layout
    scn = Scenario(sensors, np.zeros(2), np.ones((1, 3)), 0.1, 0.1, kcfg)
    a = monte_carlo_variance(scn, "lpr", 500, 7)
    b = monte_carlo_variance(scn, "lpr", 500, 7)
    assert a == b and a.std_error > 0


def test_monte_carlo_refuses_few_trials(layout):
    sensors, kcfg, _ = layout
    scn = Scenario(sensors, np.zeros(2), np.ones((1, 3)), 0.1, 0.1, kcfg)
    with pytest.raises(InvalidInputError):
        monte_carlo_variance(scn, "integrated", 99)
    with pytest.raises(InvalidInputError):
        monte_carlo_variance(scn, "kriging", 1000)
