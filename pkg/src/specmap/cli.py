"""Command-line interface.

Verbs
-----
generate  scene and measurements to files
solve     measurements to an estimate
analyze   closed-form variances against Monte Carlo
bench     experiment from a YAML or JSON config
nmse      compare two estimate (or ground-truth) files

On failure a single JSON object ``{"error": ..., "message": ...}`` is
written to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import yaml

from . import __version__
from .bench import load_config, run_experiment
from .io import read_estimate, read_measurements, write_estimate, write_ground_truth, write_measurements
from .metrics import align_sources, nmse
from .numerics import InvalidInputError
from .scene import SamplingPlan, SceneConfig, generate_scene
from .solver import KernelConfig, SolverConfig, solve
from .validation import validation_report

__all__ = ["build_parser", "main"]


def _read_mapping(path):
    if path is None:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path} does not hold a mapping")
    return data


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    """Config keys: ``scene`` and ``sampling``."""
    cfg = _read_mapping(args.config)
    scene_dict = dict(cfg.get("scene", {}))
    if args.seed is not None:
        scene_dict["rng_seed"] = args.seed
    scene = SceneConfig.from_dict(scene_dict)
    plan = SamplingPlan.from_dict(cfg.get("sampling", {"rate": 0.05}))
    gt, ms = generate_scene(scene, plan)
    out = _out_dir(args)
    write_measurements(out / "measurements.txt", ms, scene, plan, scene.rng_seed)
    write_ground_truth(out / "ground_truth.json", gt)
    print(json.dumps({"measurements": str(out / "measurements.txt"),
                      "ground_truth": str(out / "ground_truth.json"), "n_sensors": ms.n_sensors}))
    return 0


def cmd_solve(args):
    """Config keys: ``kernel``, ``solver``, ``n_sources`` and an optional ``scene``
    (for the grid) overriding the one stored with the measurements."""
    cfg = _read_mapping(args.config)
    ms, header = read_measurements(args.measurements)
    scene_dict = cfg.get("scene", header.get("scene"))
    if scene_dict is None:
        raise InvalidInputError("no scene in the config or the measurement header; the grid is unknown")
    scene = SceneConfig.from_dict(scene_dict)
    solver = dict(cfg.get("solver", {}))
    if args.seed is not None:
        solver["seed"] = args.seed
    n_sources = int(cfg.get("n_sources", scene.n_sources))
    est = solve(ms, scene.grid, KernelConfig(**cfg.get("kernel", {})), SolverConfig(**solver), n_sources)
    out = _out_dir(args)
    write_estimate(out / "estimate.json", est)
    print(json.dumps({"estimate": str(out / "estimate.json"), "converged": bool(est.converged),
                      "n_outer": int(est.n_outer), "objective": est.objective_trace[-1]}))
    return 0


def cmd_analyze(args):
    seed = 0 if args.seed is None else args.seed
    checks = validation_report(n_trials=args.trials, seed=seed)
    for c in checks:
        print(c.line())
    if args.out:
        out = _out_dir(args)
        (out / "validation.json").write_text(json.dumps([c.to_dict() for c in checks], indent=1) + "\n")
    return 0 if not args.strict or all(c.passed or c.note for c in checks) else 3


def cmd_bench(args):
    if args.config is None:
        raise InvalidInputError("bench needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    out = args.out or cfg.output_path or f"results/{cfg.name}"
    records, summary = run_experiment(cfg, out, threads=args.threads)
    for row in summary:
        print(f"{row.method:9s} {row.variant:12s} {row.sweep_value!s:>8} n={row.n:3d} "
              f"tensor {row.nmse_tensor:.4e} phi {row.nmse_phi:.4e} fields {row.nmse_fields:.4e}")
    failed = sum(r.error is not None for r in records)
    if failed:
        print(f"{failed} runs failed; see {out}/errors.log", file=sys.stderr)
    return 0


def cmd_nmse(args):
    est = read_estimate(args.estimate)
    ref = read_estimate(args.reference)
    if est.spectra_hat.shape == ref.spectra_hat.shape:
        est = align_sources(est, SimpleNamespace(spectra=ref.spectra_hat))
    result = {"nmse_tensor": nmse(est.tensor_hat, ref.tensor_hat)}
    if est.spectra_hat.shape == ref.spectra_hat.shape:
        result["nmse_phi"] = nmse(est.spectra_hat, ref.spectra_hat)
        result["nmse_fields"] = nmse(est.fields_hat, ref.fields_hat)
    print(json.dumps(result))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="specmap", description="Power spectrum map reconstruction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML or JSON file")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")

    common(sub.add_parser("generate", help="simulate a scene and its measurements"))
    sp = sub.add_parser("solve", help="reconstruct a map from a measurement file")
    sp.add_argument("measurements")
    common(sp)
    sp = sub.add_parser("analyze", help="closed-form variances against Monte Carlo")
    sp.add_argument("--trials", type=int, default=100_000)
    sp.add_argument("--strict", action="store_true", help="exit 3 when a check fails")
    common(sp, config=False)
    common(sub.add_parser("bench", help="run an experiment config"))
    sp = sub.add_parser("nmse", help="compare an estimate with a reference")
    sp.add_argument("estimate")
    sp.add_argument("reference")
    return p


COMMANDS = {"generate": cmd_generate, "solve": cmd_solve, "analyze": cmd_analyze,
            "bench": cmd_bench, "nmse": cmd_nmse}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threads", 1) < 1:
            raise InvalidInputError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
