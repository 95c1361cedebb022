"""Readers for the training-curve and coordinate-check CSV schemas.

The component boundary is a file boundary: everything this package knows
arrives through these columns.

    curves:     task_id, optimizer, param_mode, width, depth, seed, step,
                loss, diverged, ood
    coordcheck: optimizer, param_mode, width, seed, layer, step, std, diverged
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

CURVE_COLUMNS = (
    "task_id",
    "optimizer",
    "param_mode",
    "width",
    "depth",
    "seed",
    "step",
    "loss",
    "diverged",
    "ood",
)

COORD_COLUMNS = ("optimizer", "param_mode", "width", "seed", "layer", "step", "std", "diverged")


class SchemaError(ValueError):
    """A required column is missing from the input CSV."""


def _read(path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise SchemaError(f"column {col!r} missing from {path}")
        return list(reader)


def read_curves(path) -> list[dict]:
    rows = _read(path, CURVE_COLUMNS)
    for r in rows:
        r["width"] = int(r["width"])
        r["depth"] = int(r["depth"])
        r["seed"] = int(r["seed"])
        r["step"] = int(r["step"])
        r["loss"] = float(r["loss"])
        r["diverged"] = r["diverged"] == "true"
        r["ood"] = r["ood"] == "true"
    return rows


def read_coordcheck(path) -> list[dict]:
    rows = _read(path, COORD_COLUMNS)
    for r in rows:
        r["width"] = int(r["width"])
        r["seed"] = int(r["seed"])
        r["layer"] = int(r["layer"])
        r["step"] = int(r["step"])
        r["std"] = float(r["std"])
        r["diverged"] = r["diverged"] == "true"
    return rows


@dataclass
class CurveGroup:
    """One optimizer's aggregated curve inside one task panel."""

    task_id: str
    optimizer: str
    param_mode: str
    steps: np.ndarray
    mean: np.ndarray
    se: np.ndarray | None  # None for a single seed
    n_seeds: int
    any_diverged: np.ndarray
    ood_step: int | None  # first logged step flagged out-of-distribution


def aggregate_curves(rows: list[dict]) -> list[CurveGroup]:
    """Group per (task, optimizer): mean and standard error over seeds.

    Standard error is the ddof=1 standard deviation divided by sqrt(number
    of seeds); for one seed it is undefined and returned as None.
    """
    by_group = defaultdict(lambda: defaultdict(list))
    for r in rows:
        key = (r["task_id"], r["optimizer"], r["param_mode"])
        by_group[key][r["seed"]].append(r)
    out = []
    for (task_id, optimizer, mode), seed_rows in by_group.items():
        seeds = sorted(seed_rows)
        per_seed = []
        steps_ref = None
        div = None
        ood_step = None
        for s in seeds:
            rows_s = sorted(seed_rows[s], key=lambda r: r["step"])
            steps = np.array([r["step"] for r in rows_s])
            if steps_ref is None:
                steps_ref = steps
                div = np.zeros(len(steps), dtype=bool)
            elif not np.array_equal(steps, steps_ref):
                raise SchemaError(
                    f"seed {s} of ({task_id}, {optimizer}) logs different steps"
                )
            per_seed.append(np.array([r["loss"] for r in rows_s]))
            div |= np.array([r["diverged"] for r in rows_s])
            for r in rows_s:
                if r["ood"]:
                    ood_step = r["step"] if ood_step is None else min(ood_step, r["step"])
        stacked = np.stack(per_seed)
        mean = stacked.mean(axis=0)
        se = None
        if len(seeds) > 1:
            se = stacked.std(axis=0, ddof=1) / np.sqrt(len(seeds))
        out.append(
            CurveGroup(task_id, optimizer, mode, steps_ref, mean, se, len(seeds), div, ood_step)
        )
    return sorted(out, key=lambda g: (g.task_id, g.optimizer, g.param_mode))
