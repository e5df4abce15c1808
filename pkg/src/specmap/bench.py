"""Configuration-driven experiments.

An experiment sweeps one parameter over a list of values and, for every
value and seed, generates a scene, samples it, runs the requested methods
and records reconstruction errors.

Seeding
-------
Seed index ``s`` maps to the integer
``SeedSequence([master_seed, s]).generate_state(1)[0]``, used as the scene
seed and the solver seed. The same integer is used for every sweep value
and every variant, so all comparisons are paired (common random numbers).

Output
------
For every method and variant a table ``<name>__<method>__<variant>.csv``
with the columns ``sweep_value, seed, nmse_tensor, nmse_phi, nmse_fields,
runtime_s, converged``. Floats are written with ``repr``. ``runtime_s`` is
``nan`` unless ``record_runtime`` is set, because wall-clock times would
make reruns differ; times always go to ``timings.csv``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .baseline import lpr_per_band
from .io import write_estimate
from .metrics import align_sources, best_permutation, nmse
from .numerics import InvalidInputError, SvtConfig
from .scene import SamplingPlan, SceneConfig, generate_scene, off_grid_sensor_count
from .solver import KernelConfig, SolverConfig, solve

__all__ = ["ExperimentConfig", "MetricsRow", "RunRecord", "load_config", "run_experiment", "scene_seed"]

log = logging.getLogger(__name__)

COLUMNS = ("sweep_value", "seed", "nmse_tensor", "nmse_phi", "nmse_fields", "runtime_s", "converged")
METHODS = ("proposed", "baseline")


def scene_seed(master_seed, seed_index):
    """Counter-based seed for the ``seed_index``-th repetition."""
    return int(np.random.SeedSequence([int(master_seed), int(seed_index)]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Experiment description, usually loaded from YAML.

    ``scene``, ``sampling``, ``kernel`` and ``solver`` are keyword
    dictionaries for the matching config classes. ``sampling`` may use
    ``sensors_nlog2n`` (a factor ``c`` giving ``c * N * log(N)^2``
    sensors) in place of ``n_sensors`` or ``rate``. ``sweep`` names a dotted
    parameter (``"scene.shadow_sigma"``, ``"sampling.rate"``,
    ``"solver.mu"``; ``"grid.n"`` sets both grid dimensions) and its values.
    ``variants`` are labelled dotted overrides applied on top.
    """

    name: str
    scene: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=lambda: {"rate": 0.05})
    kernel: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=lambda: {"parameter": "scene.rng_seed", "values": [0]})
    n_seeds: int = 20
    master_seed: int = 0
    methods: tuple = ("proposed",)
    variants: tuple = ({"label": "default", "overrides": {}},)
    output_path: str | None = None
    save_estimates: bool = False
    record_runtime: bool = False

    def __post_init__(self):
        if self.n_seeds < 1:
            raise InvalidInputError("n_seeds must be >= 1")
        if "parameter" not in self.sweep or not self.sweep.get("values"):
            raise InvalidInputError("sweep needs a parameter and at least one value")
        for m in self.methods:
            if m not in METHODS:
                raise InvalidInputError(f"unknown method {m!r}")
        labels = [v.get("label") for v in self.variants]
        if len(set(labels)) != len(labels) or None in labels:
            raise InvalidInputError("variants need unique labels")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "variants", tuple(self.variants))
        # fail early on bad values
        for value in self.sweep["values"]:
            for variant in self.variants:
                self.resolve(value, variant, 0)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**data)

    def resolve(self, value, variant, seed):
        """Concrete (scene, sampling, kernel, solver) for one run."""
        parts = {
            "scene": copy.deepcopy(self.scene),
            "sampling": copy.deepcopy(self.sampling),
            "kernel": copy.deepcopy(self.kernel),
            "solver": copy.deepcopy(self.solver),
        }
        _set(parts, self.sweep["parameter"], value)
        for path, v in (variant.get("overrides") or {}).items():
            _set(parts, path, v)
        parts["scene"]["rng_seed"] = seed
        scene = SceneConfig.from_dict(parts["scene"])
        sampling = dict(parts["sampling"])
        factor = sampling.pop("sensors_nlog2n", None)
        if factor is not None:
            sampling.pop("rate", None)
            sampling["n_sensors"] = off_grid_sensor_count(scene.n1, factor)
        plan = SamplingPlan.from_dict(sampling)
        solver = dict(parts["solver"])
        if "svt" in solver:
            solver["svt"] = SvtConfig(**solver["svt"])
        solver.setdefault("seed", seed)
        return scene, plan, KernelConfig(**parts["kernel"]), SolverConfig(**solver)


def _set(parts, path, value):
    if path == "grid.n":
        parts["scene"]["n1"] = parts["scene"]["n2"] = int(value)
        return
    section, _, key = path.partition(".")
    if section not in parts or not key:
        raise InvalidInputError(f"cannot set {path!r}")
    target = parts[section]
    *head, last = key.split(".")
    for h in head:
        target = target.setdefault(h, {})
    target[last] = value


def load_config(path):
    """Read an :class:`ExperimentConfig` from YAML or JSON."""
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path} does not hold a mapping")
    return ExperimentConfig.from_dict(data)


@dataclass(frozen=True)
class RunRecord:
    """Result of one (sweep value, seed, method, variant) run."""

    sweep_index: int
    sweep_value: object
    seed: int
    method: str
    variant: str
    nmse_tensor: float
    nmse_phi: float
    nmse_fields: float
    runtime_s: float
    converged: bool
    alignment_ok: bool | None = None
    error: str | None = None


@dataclass(frozen=True)
class MetricsRow:
    """Seed-averaged metrics for one sweep value."""

    method: str
    variant: str
    sweep_value: object
    n: int
    nmse_tensor: float
    nmse_tensor_se: float
    nmse_phi: float
    nmse_phi_se: float
    nmse_fields: float
    nmse_fields_se: float


def _alignment_ok(est, gt):
    """True when the spectrum-optimal ordering also minimizes the field error."""
    by_phi = best_permutation(est.spectra_hat, gt.spectra)
    by_field = best_permutation(est.fields_hat.reshape(len(gt.fields), -1),
                                gt.fields.reshape(len(gt.fields), -1))
    return by_phi == by_field


def _run_one(cfg, index, value, seed_index, variant, out_dir):
    seed = scene_seed(cfg.master_seed, seed_index)
    scene, plan, kcfg, scfg = cfg.resolve(value, variant, seed)
    records = []
    try:
        gt, ms = generate_scene(scene, plan)
        setup_error = None
    except Exception as exc:
        log.warning("scene %s/%s failed: %s", value, seed_index, exc)
        setup_error = f"{type(exc).__name__}: {exc}"
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            if setup_error is not None:
                raise RuntimeError(setup_error)
            if method == "proposed":
                est = solve(ms, scene.grid, kcfg, scfg, scene.n_sources)
                ok = _alignment_ok(est, gt)
                est = align_sources(est, gt)
                errs = (nmse(est.tensor_hat, gt.tensor), nmse(est.spectra_hat, gt.spectra),
                        nmse(est.fields_hat, gt.fields))
                conv = bool(est.converged)
                if out_dir is not None and cfg.save_estimates:
                    name = f"{cfg.name}__{method}__{variant['label']}__{index}__{seed_index}.json"
                    write_estimate(out_dir / "estimates" / name, est)
            else:
                est_b = lpr_per_band(ms, scene.grid, kcfg)
                errs = (nmse(est_b.tensor(), gt.tensor), math.nan, math.nan)
                ok, conv = None, True
            err = None
        except Exception as exc:  # a failed run is recorded, the sweep goes on
            log.warning("run %s/%s/%s failed: %s", value, seed_index, method, exc)
            errs, ok, conv = (math.nan, math.nan, math.nan), None, False
            err = setup_error or f"{type(exc).__name__}: {exc}"
        records.append(RunRecord(index, value, seed_index, method, variant["label"], *errs,
                                 time.perf_counter() - t0, conv, ok, err))
    return records


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _mean_se(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), se


def summarize(records):
    """Seed-averaged :class:`MetricsRow` per (method, variant, sweep value)."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.variant, r.sweep_index), []).append(r)
    rows = []
    for (method, variant, _), rs in sorted(groups.items(), key=lambda kv: kv[0]):
        stats = [_mean_se([getattr(r, name) for r in rs]) for name in ("nmse_tensor", "nmse_phi", "nmse_fields")]
        rows.append(MetricsRow(method, variant, rs[0].sweep_value, len(rs),
                               stats[0][0], stats[0][1], stats[1][0], stats[1][1], stats[2][0], stats[2][1]))
    return rows


def write_tables(cfg, records, out_dir):
    """Write the per-run tables, the summary and the timings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for method in cfg.methods:
        for variant in cfg.variants:
            rs = [r for r in records if r.method == method and r.variant == variant["label"]]
            path = out_dir / f"{cfg.name}__{method}__{variant['label']}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(COLUMNS)
                for r in rs:
                    runtime = r.runtime_s if cfg.record_runtime else math.nan
                    w.writerow([_fmt(r.sweep_value), r.seed, _fmt(r.nmse_tensor), _fmt(r.nmse_phi),
                                _fmt(r.nmse_fields), _fmt(runtime), _fmt(r.converged)])
            paths.append(path)
    with open(out_dir / f"{cfg.name}__summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "variant", "sweep_value", "n", "nmse_tensor", "nmse_tensor_se",
                    "nmse_phi", "nmse_phi_se", "nmse_fields", "nmse_fields_se"])
        for row in summarize(records):
            w.writerow([row.method, row.variant, _fmt(row.sweep_value), row.n] +
                       [_fmt(getattr(row, n)) for n in ("nmse_tensor", "nmse_tensor_se", "nmse_phi",
                                                        "nmse_phi_se", "nmse_fields", "nmse_fields_se")])
    with open(out_dir / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "variant", "sweep_value", "seed", "runtime_s"])
        for r in records:
            w.writerow([r.method, r.variant, _fmt(r.sweep_value), r.seed, f"{r.runtime_s:.3f}"])
    failures = [r for r in records if r.error]
    if failures:
        with open(out_dir / "errors.log", "w") as fh:
            for r in failures:
                fh.write(f"{r.method} {r.variant} {r.sweep_value} {r.seed}: {r.error}\n")
    return paths


def _task(args):
    return _run_one(*args)


def run_experiment(cfg, out_dir=None, threads=1):
    """Run every (sweep value, seed, variant) combination.

    Parameters
    ----------
    cfg : ExperimentConfig
    out_dir : path, optional
        Where tables go; defaults to ``cfg.output_path``. Nothing is written
        when both are None.
    threads : int
        Worker processes. Results are ordered by index, never by completion.

    Returns
    -------
    records : list of RunRecord
    summary : list of MetricsRow
    """
    out = out_dir or cfg.output_path
    out = Path(out) if out is not None else None
    if out is not None and cfg.save_estimates:
        (out / "estimates").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, i, value, s, variant, out)
             for i, value in enumerate(cfg.sweep["values"])
             for s in range(cfg.n_seeds)
             for variant in cfg.variants]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    records = [r for batch in results for r in batch]
    if out is not None:
        write_tables(cfg, records, out)
    return records, summarize(records)
