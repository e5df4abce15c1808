"""Plain-text persistence for measurements, ground truth and estimates.

Measurement files
-----------------
Header lines start with ``#``::

    # specmap-measurements 1
    # scene {...json SceneConfig...}
    # sampling {...json SamplingPlan...}
    # seed 7
    # on_grid false
    # n_bands 20

followed by one line per sensor: ``x y band:value band:value ...`` with
zero-based band indices. Floats are written with ``repr`` so a write/read
cycle reproduces every bit.

Ground truth and estimates are JSON documents of nested lists.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numerics import InvalidInputError
from .scene import GroundTruth, MeasurementSet
from .solver import Estimate

__all__ = [
    "read_estimate",
    "read_ground_truth",
    "read_measurements",
    "write_estimate",
    "write_ground_truth",
    "write_measurements",
]

MAGIC = "specmap-measurements 1"


def write_measurements(path, ms, scene=None, sampling=None, seed=None):
    """Write a :class:`MeasurementSet` with an optional provenance header."""
    lines = [f"# {MAGIC}"]
    if scene is not None:
        lines.append("# scene " + json.dumps(scene.to_dict(), sort_keys=True))
    if sampling is not None:
        lines.append("# sampling " + json.dumps(sampling.to_dict(), sort_keys=True))
    if seed is not None:
        lines.append(f"# seed {int(seed)}")
    lines.append(f"# on_grid {'true' if ms.on_grid else 'false'}")
    lines.append(f"# n_bands {ms.n_bands}")
    for m in range(ms.n_sensors):
        x, y = ms.locations[m]
        pairs = [f"{k}:{float(ms.readings[m, k])!r}" for k in np.flatnonzero(ms.band_mask[m])]
        lines.append(" ".join([repr(float(x)), repr(float(y))] + pairs))
    Path(path).write_text("\n".join(lines) + "\n")


def read_measurements(path):
    """Inverse of :func:`write_measurements`.

    Returns
    -------
    ms : MeasurementSet
    header : dict
        ``scene`` and ``sampling`` dictionaries and ``seed`` when present.
    """
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != f"# {MAGIC}":
        raise InvalidInputError(f"{path} is not a measurement file")
    header = {}
    rows = []
    for line in text[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            if key in ("scene", "sampling"):
                header[key] = json.loads(value)
            elif key in ("seed", "n_bands"):
                header[key] = int(value)
            elif key == "on_grid":
                header[key] = value.strip() == "true"
            continue
        rows.append(line.split())
    if "n_bands" not in header:
        raise InvalidInputError("missing n_bands header")
    K = header["n_bands"]
    M = len(rows)
    loc = np.zeros((M, 2))
    mask = np.zeros((M, K), dtype=bool)
    vals = np.full((M, K), np.nan)
    for m, parts in enumerate(rows):
        loc[m] = float(parts[0]), float(parts[1])
        for item in parts[2:]:
            k, _, v = item.partition(":")
            k = int(k)
            if not 0 <= k < K:
                raise InvalidInputError(f"band index {k} out of range on sensor {m}")
            mask[m, k] = True
            vals[m, k] = float(v)
    ms = MeasurementSet(loc, mask, vals, bool(header.get("on_grid", False)))
    return ms, header


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def write_ground_truth(path, gt):
    _dump(path, {
        "kind": "ground_truth",
        "fields": gt.fields.tolist(),
        "spectra": gt.spectra.tolist(),
        "tensor": gt.tensor.tolist(),
        "source_locations": gt.source_locations.tolist(),
    })


def read_ground_truth(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "ground_truth":
        raise InvalidInputError(f"{path} is not a ground-truth file")
    return GroundTruth(np.array(doc["fields"]), np.array(doc["spectra"]),
                       np.array(doc["tensor"]), np.array(doc["source_locations"]))


def write_estimate(path, est):
    _dump(path, {
        "kind": "estimate",
        "fields": est.fields_hat.tolist(),
        "spectra": est.spectra_hat.tolist(),
        "tensor": est.tensor_hat.tolist(),
        "objective_trace": list(est.objective_trace),
        "converged": bool(est.converged),
        "n_outer": int(est.n_outer),
    })


def read_estimate(path):
    """Read an estimate; ground-truth files are accepted too."""
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") == "ground_truth":
        return Estimate(np.array(doc["fields"]), np.array(doc["spectra"]), np.array(doc["tensor"]),
                        (), True)
    if doc.get("kind") != "estimate":
        raise InvalidInputError(f"{path} is not an estimate file")
    return Estimate(np.array(doc["fields"]), np.array(doc["spectra"]), np.array(doc["tensor"]),
                    tuple(doc["objective_trace"]), bool(doc["converged"]), n_outer=int(doc["n_outer"]))
