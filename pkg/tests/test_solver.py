import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specmap.analysis import topology_constant
from specmap.grid import Grid
from specmap.numerics import InvalidInputError, SvtConfig
from specmap.scene import MeasurementSet, SamplingPlan, SceneConfig, generate_scene
from specmap.solver import (
    KernelConfig,
    SolverConfig,
    assemble_normal_matrix,
    design_matrix,
    design_vector,
    epanechnikov,
    expand_coefficients,
    interpolation_mask,
    kernel_weights,
    objective_value,
    reduce_coefficients,
    solve,
    update_fields,
    update_phi,
    update_theta,
)


def quadratic_field(z):
    z = np.atleast_2d(z)
    x, y = z[:, 0], z[:, 1]
    return 2.0 + 0.1 * x - 0.05 * y + 0.01 * x * x + 0.003 * x * y - 0.02 * y * y


def quadratic_coefficients(c):
    """Seven-slot Taylor coefficients of ``quadratic_field`` around ``c``."""
    x, y = c
    g = [0.1 + 0.02 * x + 0.003 * y, -0.05 + 0.003 * x - 0.04 * y]
    return np.array([quadratic_field(c)[0], g[0], g[1], 0.01, 0.0015, 0.0015, -0.02])


def random_measurements(rng, M=20, K=4, R=2, side=10.0, mask_p=1.0):
    loc = rng.uniform(-side / 2, side / 2, size=(M, 2))
    phi = rng.uniform(0.2, 1.0, size=(R, K))
    vals = rng.uniform(0.5, 2.0, size=(M, K))
    mask = rng.random((M, K)) < mask_p
    mask[np.arange(M), rng.integers(0, K, M)] = True
    return MeasurementSet(loc, mask, np.where(mask, vals, np.nan)), phi


# --------------------------------------------------------------------------
# design and kernel
# --------------------------------------------------------------------------


@pytest.mark.parametrize("offset,expected", [
    ((0.0, 0.0), [1, 0, 0, 0, 0, 0, 0]),
    ((1.0, 0.0), [1, 1, 0, 1, 0, 0, 0]),
    ((2.0, 3.0), [1, 2, 3, 4, 6, 6, 9]),
])
def test_design_vector(offset, expected):
    c = np.array([4.0, -1.0])
    np.testing.assert_array_equal(design_vector(c + np.array(offset), c), expected)


def test_design_matrix_layouts(rng):
    pts = rng.standard_normal((5, 2))
    c = np.array([0.3, -0.2])
    full = design_matrix(pts, c)
    np.testing.assert_array_equal(full, np.stack([design_vector(p, c) for p in pts]))
    reduced = design_matrix(pts, c, reduced=True)
    theta = rng.standard_normal(7)
    np.testing.assert_allclose(full @ theta, reduced @ reduce_coefficients(theta), atol=1e-12)
    np.testing.assert_allclose(reduce_coefficients(expand_coefficients(theta[:6])), theta[:6])


def test_kernel_weight_at_center_and_support():
    kcfg = KernelConfig(bandwidth=2.0)
    nb = kernel_weights(np.zeros((1, 2)), np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 0.0]]), kcfg)
    dense = nb.dense(4)[0]
    np.testing.assert_allclose(dense, [0.75, 0.0, 0.0, 0.75 * (1 - 0.25)])
    assert epanechnikov(1.0) == 0.0 and epanechnikov(0.0) == 0.75


def test_adaptive_bandwidth_guarantees_neighbors():
    rng = np.random.default_rng(0)
    sensors = rng.uniform(0, 50, size=(130, 2))
    grid = Grid(31, 31, 50.0)
    nb = kernel_weights(grid.flat_centers(), sensors, KernelConfig(min_neighbors=14))
    assert np.all(nb.n_positive >= 14)


def test_adaptive_bandwidth_with_ties():
    sensors = np.array([[np.cos(t), np.sin(t)] for t in np.linspace(0, 2 * np.pi, 16, endpoint=False)])
    sensors = np.vstack([sensors, [[3.0, 0.0]]])
    nb = kernel_weights(np.zeros((1, 2)), sensors, KernelConfig(min_neighbors=8))
    assert nb.n_positive[0] >= 8


def test_kernel_needs_enough_sensors():
    with pytest.raises(InvalidInputError):
        kernel_weights(np.zeros((1, 2)), np.zeros((5, 2)), KernelConfig(min_neighbors=14))
    with pytest.raises(InvalidInputError):
        KernelConfig(min_neighbors=6)
    with pytest.raises(InvalidInputError):
        KernelConfig(bandwidth=0.0)


def test_interpolation_masks():
    assert interpolation_mask((4, 4), "full").all()
    m = interpolation_mask((10, 10), "random", fraction=0.5, seed=3)
    assert m.sum() == 50
    np.testing.assert_array_equal(m, interpolation_mask((10, 10), "random", fraction=0.5, seed=3))
    s = interpolation_mask((4, 4), "stride", stride=2)
    assert s[0, 0] and not s[0, 1] and s[1, 1]
    l = interpolation_mask((4, 4), "list", cells=[(1, 2)])
    assert l.sum() == 1 and l[1, 2]
    with pytest.raises(InvalidInputError):
        interpolation_mask((4, 4), "list", cells=[])


# --------------------------------------------------------------------------
# local model update
# --------------------------------------------------------------------------


def test_update_theta_single_sensor_at_center():
    ms = MeasurementSet(np.array([[1.0, 1.0]]), np.ones((1, 1), bool), np.array([[3.7]]))
    theta = update_theta(np.array([1.0, 1.0]), np.ones((1, 1)), np.zeros(1), ms, np.array([0.75]), ridge=1e-6)
    assert theta[0] == pytest.approx(3.7, rel=1e-12)


def test_update_theta_large_coupling_pins_constant(rng):
    ms, phi = random_measurements(rng)
    s_vals = np.array([5.0, -3.0])
    theta = update_theta(np.zeros(2), phi, s_vals, ms, np.ones(20), nu=1e12)
    np.testing.assert_allclose(theta[[0, 7]], s_vals, rtol=1e-6)


def test_update_theta_matches_dense_solve(rng):
    ms, phi = random_measurements(rng, M=20, K=4, R=2, mask_p=0.7)
    w = rng.uniform(0.1, 1.0, 20)
    c = np.array([0.5, -0.5])
    s_vals = np.array([0.4, 1.1])
    nu = 0.3
    # stack one weighted row per observed (m, k) plus the coupling rows
    X = design_matrix(ms.locations, c, reduced=True)
    rows, target, wts = [], [], []
    for m in range(20):
        for k in range(4):
            if ms.band_mask[m, k]:
                rows.append(np.concatenate([phi[r, k] * X[m] for r in range(2)]))
                target.append(ms.readings[m, k])
                wts.append(w[m])
    for r in range(2):
        e = np.zeros(12)
        e[6 * r] = 1.0
        rows.append(e)
        target.append(s_vals[r])
        wts.append(nu)
    A, y, sw = np.array(rows), np.array(target), np.sqrt(wts)
    ref = np.linalg.solve((A * sw[:, None] ** 2).T @ A, (A * sw[:, None] ** 2).T @ y)
    got = reduce_coefficients(update_theta(c, phi, s_vals, ms, w, nu=nu).reshape(2, 7)).ravel()
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())


def test_normal_matrix_factorizes_into_topology(rng):
    sensors = rng.uniform(-5, 5, size=(30, 2))
    kcfg = KernelConfig(min_neighbors=14)
    topo = topology_constant(sensors, np.zeros(2), kcfg)
    phi = rng.uniform(0.1, 2.0, size=(1, 20))
    ms = MeasurementSet(sensors, np.ones((30, 20), bool), np.ones((30, 20)))
    N = assemble_normal_matrix(np.zeros(2), phi, ms, topo.weights)
    np.testing.assert_allclose(N, np.sum(phi ** 2) * topo.a1, rtol=1e-10, atol=1e-10 * np.abs(N).max())


def test_normal_matrix_with_sparse_bands(rng):
    sensors = rng.uniform(-5, 5, size=(30, 2))
    topo = topology_constant(sensors, np.zeros(2), KernelConfig(min_neighbors=14))
    mask = np.zeros((30, 20), bool)
    for m in range(30):
        mask[m, rng.choice(20, 7, replace=False)] = True
    ms = MeasurementSet(sensors, mask, np.where(mask, 1.0, np.nan))
    N = assemble_normal_matrix(np.zeros(2), np.ones((1, 20)), ms, topo.weights)
    np.testing.assert_allclose(N, 7 * topo.a1, rtol=1e-10, atol=1e-10 * np.abs(N).max())


# --------------------------------------------------------------------------
# spectrum update
# --------------------------------------------------------------------------


def _exact_setup(rng, K=5, M=60):
    loc = rng.uniform(0, 10, size=(M, 2))
    phi = rng.uniform(0.2, 1.5, size=(1, K))
    phi *= K / phi.sum()
    vals = quadratic_field(loc)[:, None] * phi
    ms = MeasurementSet(loc, np.ones((M, K), bool), vals)
    grid = Grid(4, 4, 10.0)
    cells = grid.flat_centers()[[0, 5, 10, 15]]
    nb = kernel_weights(cells, loc, KernelConfig(min_neighbors=14))
    theta = np.stack([quadratic_coefficients(c) for c in cells])
    return ms, nb, theta, phi


def test_update_phi_recovers_spectrum_with_exact_models(rng):
    ms, nb, theta, phi = _exact_setup(rng)
    np.testing.assert_allclose(update_phi(theta, ms, nb), phi, rtol=1e-9)
    np.testing.assert_allclose(update_phi(theta, ms, nb, row_sum=5.0), phi, rtol=1e-9)


def test_update_phi_is_homogeneous(rng):
    ms, nb, theta, phi = _exact_setup(rng)
    noisy = ms.readings + 0.1 * rng.standard_normal(ms.readings.shape)
    a = update_phi(theta, MeasurementSet(ms.locations, ms.band_mask, noisy), nb)
    b = update_phi(theta, MeasurementSet(ms.locations, ms.band_mask, 3.0 * noisy), nb)
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-10)


def _phi_objective(phi, theta, ms, nb):
    total = 0.0
    for c in range(nb.index.shape[0]):
        for p in range(nb.index.shape[1]):
            m = nb.index[c, p]
            x = design_vector(ms.locations[m], nb.centers[c])
            for k in range(ms.n_bands):
                if ms.band_mask[m, k]:
                    pred = sum(x @ theta[c, r] * phi[r, k] for r in range(phi.shape[0]))
                    total += nb.weight[c, p] * (ms.readings[m, k] - pred) ** 2
    return total


def test_update_phi_beats_random_probes_and_meets_kkt(rng):
    ms, _ = random_measurements(rng, M=20, K=5, R=2, side=10.0)
    cells = np.array([[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0], [2.0, 2.0]])
    nb = kernel_weights(cells, ms.locations, KernelConfig(min_neighbors=14))
    theta = rng.standard_normal((4, 2, 7)) * np.array([1, .1, .1, .01, .01, .01, .01])
    phi = update_phi(theta, ms, nb)
    assert np.all(phi >= 0)
    f = _phi_objective(phi, theta, ms, nb)
    for _ in range(100):
        assert f <= _phi_objective(rng.uniform(0, 2, size=phi.shape), theta, ms, nb) + 1e-12
    # KKT of the per-band problems via a finite-difference gradient
    eps = 1e-6
    for r in range(2):
        for k in range(5):
            d = np.zeros_like(phi)
            d[r, k] = eps
            g = (_phi_objective(phi + d, theta, ms, nb) - _phi_objective(phi - d, theta, ms, nb)) / (2 * eps)
            scale = max(1.0, f)
            if phi[r, k] > 0:
                assert abs(g) <= 1e-6 * scale
            else:
                assert g >= -1e-6 * scale


# --------------------------------------------------------------------------
# field update
# --------------------------------------------------------------------------


def test_update_fields_zero_mu_full_set(rng):
    alpha = rng.standard_normal((2, 5, 6))
    out, ok = update_fields(alpha, np.ones((5, 6), bool), 0.0)
    np.testing.assert_allclose(out, alpha, atol=1e-12)
    assert ok


def test_update_fields_rank_one_completion(rng):
    truth = np.outer(rng.uniform(0.5, 1.5, 31), rng.uniform(0.5, 1.5, 31))[None]
    mask = rng.random((31, 31)) < 0.4
    out, _ = update_fields(truth, mask, 1e-3, SvtConfig(max_iter=5000, tol=1e-9))
    held = ~mask
    rel = np.linalg.norm(out[0][held] - truth[0][held]) / np.linalg.norm(truth[0][held])
    assert rel <= 0.05


def test_update_fields_is_separable(rng):
    alpha = rng.standard_normal((2, 8, 8))
    mask = rng.random((8, 8)) < 0.6
    joint, _ = update_fields(alpha, mask, 0.3)
    for r in range(2):
        single, _ = update_fields(alpha[r:r + 1], mask, 0.3)
        np.testing.assert_array_equal(joint[r], single[0])


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def _small_problem(rng, R=2, K=3):
    grid = Grid(3, 3, 9.0)
    loc = rng.uniform(0, 9, size=(25, 2))
    mask = rng.random((25, K)) < 0.8
    mask[:, 0] = True
    ms = MeasurementSet(loc, mask, np.where(mask, rng.uniform(0, 2, (25, K)), np.nan))
    cell_mask = np.zeros((3, 3), bool)
    cell_mask[[0, 1, 2], [0, 1, 2]] = True
    return grid, ms, cell_mask


def test_objective_zero_for_perfect_fit(rng):
    grid = Grid(3, 3, 9.0)
    loc = rng.uniform(0, 9, size=(30, 2))
    phi = np.array([[1.0, 2.0]])
    ms = MeasurementSet(loc, np.ones((30, 2), bool), quadratic_field(loc)[:, None] * phi)
    cell_mask = np.ones((3, 3), bool)
    theta = np.stack([quadratic_coefficients(c) for c in grid.flat_centers()])[:, None, :]
    f = objective_value(ms, grid, KernelConfig(min_neighbors=14), cell_mask, phi, theta, np.zeros((1, 3, 3)), 0, 0)
    assert f == pytest.approx(0.0, abs=1e-20)


def test_objective_nuclear_term(rng):
    grid, ms, cell_mask = _small_problem(rng, R=1, K=1)
    kcfg = KernelConfig(min_neighbors=14)
    theta = np.zeros((3, 1, 7))
    fields = np.diag([3.0, 1.0, 0.0])[None]
    theta[:, 0, 0] = [3.0, 1.0, 0.0]  # constant terms equal to the fields: no coupling cost
    mu = 0.25
    f0 = objective_value(ms, grid, kcfg, cell_mask, np.ones((1, 1)), theta, fields, 1.0, 0.0)
    f1 = objective_value(ms, grid, kcfg, cell_mask, np.ones((1, 1)), theta, fields, 1.0, mu)
    assert f1 - f0 == pytest.approx(4 * mu, rel=1e-12)


def test_objective_matches_naive_loops(rng):
    grid, ms, cell_mask = _small_problem(rng)
    kcfg = KernelConfig(min_neighbors=14)
    phi = rng.uniform(0, 1, (2, 3))
    theta = rng.standard_normal((3, 2, 7)) * 0.2
    fields = rng.standard_normal((2, 3, 3))
    nu, mu = 0.7, 0.2
    got = objective_value(ms, grid, kcfg, cell_mask, phi, theta, fields, nu, mu)
    cells = np.flatnonzero(cell_mask.ravel())
    centers = grid.flat_centers()[cells]
    W = kernel_weights(centers, ms.locations, kcfg).dense(ms.n_sensors)
    ref = 0.0
    for ci, cell in enumerate(cells):
        i, j = divmod(cell, 3)
        for m in range(ms.n_sensors):
            x = design_vector(ms.locations[m], centers[ci])
            for k in range(3):
                if ms.band_mask[m, k]:
                    pred = sum((x @ theta[ci, r]) * phi[r, k] for r in range(2))
                    ref += W[ci, m] * (ms.readings[m, k] - pred) ** 2
        for r in range(2):
            ref += nu * (theta[ci, r, 0] - fields[r, i, j]) ** 2
    for r in range(2):
        ref += nu * mu * np.linalg.svd(fields[r], compute_uv=False).sum()
    assert got == pytest.approx(ref, rel=1e-10)


# --------------------------------------------------------------------------
# full solver
# --------------------------------------------------------------------------


def _scene(seed, **kw):
    base = dict(n1=12, n2=12, area_side_m=30.0, n_sources=2, n_bands=6, shadow_sigma=2.0, snr_db=25.0,
                rng_seed=seed)
    base.update(kw)
    return SceneConfig(**base)


@pytest.mark.parametrize("phi_update", ["simplex", "nnls_normalize"])
def test_solver_trace_monotone_and_spectra_normalized(phi_update):
    cfg = _scene(1)
    gt, ms = generate_scene(cfg, SamplingPlan(rate=0.4))
    est = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=10, phi_update=phi_update), 2)
    assert np.all(np.diff(est.objective_trace) <= 1e-9)
    assert np.all(est.spectra_hat >= 0)
    np.testing.assert_allclose(est.spectra_hat.sum(axis=1), 6, rtol=1e-9)
    np.testing.assert_allclose(est.tensor_hat, np.einsum("rij,rk->ijk", est.fields_hat, est.spectra_hat),
                               atol=1e-12)


def test_solver_noiseless_dense_single_source():
    cfg = SceneConfig(n1=12, n2=12, area_side_m=30.0, n_sources=1, n_bands=5, source_height_m=10.0, rng_seed=3)
    gt, ms = generate_scene(cfg, SamplingPlan(rate=2.0))
    est = solve(ms, cfg.grid, KernelConfig(), SolverConfig(nu=1e-4, mu=0.0, interp_set="full"), 1)
    err = np.sum((est.tensor_hat - gt.tensor) ** 2) / np.sum(gt.tensor ** 2)
    assert err <= 1e-3


def test_solver_single_cell_decoupled_matches_standalone():
    cfg = SceneConfig(n1=8, n2=8, n_sources=1, n_bands=1, spectrum_model="flat", shadow_sigma=2.0,
                      snr_db=20.0, rng_seed=4)
    gt, ms = generate_scene(cfg, SamplingPlan(n_sensors=40))
    scfg = SolverConfig(nu=0.0, mu=0.0, interp_set="list", interp_cells=((3, 4),), max_outer=3)
    est = solve(ms, cfg.grid, KernelConfig(), scfg, 1)
    center = cfg.grid.centers[3, 4]
    w = kernel_weights(center[None], ms.locations, KernelConfig()).dense(ms.n_sensors)[0]
    ref = update_theta(center, np.ones((1, 1)), np.zeros(1), ms, w)
    np.testing.assert_allclose(est.theta[0, 0], ref, rtol=1e-10, atol=1e-12)


def test_solver_output_invariant_under_source_permutation():
    cfg = _scene(5)
    _, ms = generate_scene(cfg, SamplingPlan(rate=0.4))
    est = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=5), 2)
    perm = [1, 0]
    swapped = np.einsum("rij,rk->ijk", est.fields_hat[perm], est.spectra_hat[perm])
    np.testing.assert_allclose(swapped, est.tensor_hat, atol=1e-10)


def test_solver_is_deterministic():
    cfg = _scene(6)
    _, ms = generate_scene(cfg, SamplingPlan(rate=0.4))
    a = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=4), 2)
    b = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=4), 2)
    assert a.tensor_hat.tobytes() == b.tensor_hat.tobytes()


@given(st.integers(0, 10_000))
def test_solver_monotone_property(seed):
    cfg = SceneConfig(n1=8, n2=8, area_side_m=20.0, n_sources=2, n_bands=4, shadow_sigma=3.0, snr_db=15.0,
                      rng_seed=seed)
    _, ms = generate_scene(cfg, SamplingPlan(rate=0.6, band_scheme="uniform", bands_per_sensor=3))
    est = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=6, init="uniform", seed=seed), 2)
    assert np.all(np.diff(est.objective_trace) <= 1e-9)


def test_solver_config_validation():
    with pytest.raises(InvalidInputError):
        SolverConfig(nu=-1)
    with pytest.raises(InvalidInputError):
        SolverConfig(phi_update="bogus")
    cfg = SolverConfig(svt={"max_iter": 10})
    assert isinstance(cfg.svt, SvtConfig) and cfg.svt.max_iter == 10
