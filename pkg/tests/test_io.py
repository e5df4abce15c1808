import numpy as np
import pytest

from specmap.io import (
    read_estimate,
    read_ground_truth,
    read_measurements,
    write_estimate,
    write_ground_truth,
    write_measurements,
)
from specmap.numerics import InvalidInputError
from specmap.scene import SamplingPlan, SceneConfig, generate_scene
from specmap.solver import KernelConfig, SolverConfig, solve


@pytest.fixture(scope="module")
def scene():
    cfg = SceneConfig(n1=10, n2=10, n_bands=6, shadow_sigma=3.0, snr_db=20.0, rng_seed=8)
    plan = SamplingPlan(rate=0.5, band_scheme="uniform", bands_per_sensor=3)
    gt, ms = generate_scene(cfg, plan)
    return cfg, plan, gt, ms


def test_measurement_round_trip_is_bit_exact(tmp_path, scene):
    cfg, plan, _, ms = scene
    path = tmp_path / "m.txt"
    write_measurements(path, ms, cfg, plan, 8)
    back, header = read_measurements(path)
    assert back.locations.tobytes() == ms.locations.tobytes()
    assert back.band_mask.tobytes() == ms.band_mask.tobytes()
    np.testing.assert_array_equal(back.readings, ms.readings)
    assert SceneConfig.from_dict(header["scene"]) == cfg
    assert SamplingPlan.from_dict(header["sampling"]) == plan
    assert header["seed"] == 8
    write_measurements(tmp_path / "again.txt", back, cfg, plan, 8)
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_ground_truth_round_trip(tmp_path, scene):
    _, _, gt, _ = scene
    write_ground_truth(tmp_path / "gt.json", gt)
    back = read_ground_truth(tmp_path / "gt.json")
    assert back.tensor.tobytes() == gt.tensor.tobytes()
    assert back.spectra.tobytes() == gt.spectra.tobytes()


def test_estimate_round_trip(tmp_path, scene):
    cfg, _, _, ms = scene
    est = solve(ms, cfg.grid, KernelConfig(), SolverConfig(max_outer=2), 2)
    write_estimate(tmp_path / "e.json", est)
    back = read_estimate(tmp_path / "e.json")
    assert back.tensor_hat.tobytes() == est.tensor_hat.tobytes()
    assert back.objective_trace == est.objective_trace
    assert back.n_outer == est.n_outer


def test_ground_truth_reads_as_estimate(tmp_path, scene):
    _, _, gt, _ = scene
    write_ground_truth(tmp_path / "gt.json", gt)
    est = read_estimate(tmp_path / "gt.json")
    np.testing.assert_array_equal(est.tensor_hat, gt.tensor)


def test_bad_files(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("hello\n")
    with pytest.raises(InvalidInputError):
        read_measurements(p)
    p.write_text("# specmap-measurements 1\n# n_bands 2\n0.0 0.0 5:1.0\n")
    with pytest.raises(InvalidInputError):
        read_measurements(p)
    q = tmp_path / "bad.json"
    q.write_text('{"kind": "other"}')
    with pytest.raises(InvalidInputError):
        read_estimate(q)
    with pytest.raises(InvalidInputError):
        read_ground_truth(q)
