"""Coordinate check: per-layer drift of pre-activations across widths.

For each (width, seed) cell we freeze a probe batch, cache the initial
pre-activations of every layer (logits included), train on the task's batch
stream with the optimizer under test, and periodically record

    std( h_t[layer] - h_0[layer] )

computed jointly over batch x coordinate. Flat curves across widths are the
signature of a correctly scaled parametrization; growth with width is the
blow-up this check exists to expose.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .harness import OptimizerSpec
from .optimizee import Dataset, forward, init_mlp, sample_batch
from .pes import TaskSpec
from .tensor import RngStream

__all__ = ["CoordCheckRecord", "run_coordcheck", "emit_coordcheck_csv", "COORD_COLUMNS"]

COORD_COLUMNS = ("optimizer", "param_mode", "width", "seed", "layer", "step", "std", "diverged")


@dataclass(frozen=True)
class CoordCheckRecord:
    optimizer: str
    param_mode: str
    width: int
    seed: int
    layer: int
    step: int
    std: float
    diverged: bool


def _cell(
    opt: OptimizerSpec,
    task: TaskSpec,
    ds: Dataset,
    width: int,
    seed: int,
    steps: int,
    log_every: int,
    probe_batch: int,
    std_cap: float,
) -> list[CoordCheckRecord]:
    # probe batch is per-seed (shared across widths so cells are comparable)
    probe_rng = RngStream(seed).child(7)
    Xp, yp = sample_batch(ds, probe_batch, probe_rng)
    cell_rng = RngStream(seed).child(width)
    spec = replace(task, width=width).mlp_spec(opt.mode, opt.multipliers)
    params = init_mlp(spec, cell_rng.child(0))
    runner = opt.make_runner(params)
    batch_rng = cell_rng.child(1)

    h0 = forward(params, Xp, yp).preacts
    n_layers = len(h0)
    records = [
        CoordCheckRecord(opt.name, opt.mode.value, width, seed, l, 0, 0.0, False)
        for l in range(n_layers)
    ]
    diverged = False
    for t in range(1, steps + 1):
        X, y = sample_batch(ds, task.batch_size, batch_rng)
        if not diverged:
            runner.step(X, y)
            diverged = runner.diverged
        if t % log_every == 0 or t == steps:
            if diverged:
                stds = [std_cap] * n_layers
            else:
                rec = forward(params, Xp, yp)
                stds = []
                with np.errstate(over="ignore", invalid="ignore"):
                    for l in range(n_layers):
                        s = float(np.std(rec.preacts[l] - h0[l]))
                        # runaway-but-finite drift counts as divergence too
                        if not np.isfinite(s) or s > std_cap:
                            s = std_cap
                            diverged = True
                        stds.append(s)
            for l in range(n_layers):
                records.append(
                    CoordCheckRecord(
                        opt.name, opt.mode.value, width, seed, l, t, stds[l], diverged
                    )
                )
    return records


def run_coordcheck(
    widths: list[int],
    opt: OptimizerSpec,
    task: TaskSpec,
    steps: int,
    seeds: list[int],
    log_every: int = 10,
    probe_batch: int = 256,
    std_cap: float = 1e6,
    threads: int = 1,
) -> list[CoordCheckRecord]:
    """Run every (width, seed) cell; records are ordered by (width, seed, step)."""
    ds = task.load()
    cells = [(w, s) for w in widths for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_cell, opt, task, ds, w, s, steps, log_every, probe_batch, std_cap)
                for w, s in cells
            ]
            chunks = [f.result() for f in futures]
    else:
        chunks = [
            _cell(opt, task, ds, w, s, steps, log_every, probe_batch, std_cap)
            for w, s in cells
        ]
    return [r for chunk in chunks for r in chunk]


def emit_coordcheck_csv(records: list[CoordCheckRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COORD_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.optimizer,
                    r.param_mode,
                    r.width,
                    r.seed,
                    r.layer,
                    r.step,
                    repr(r.std),
                    str(r.diverged).lower(),
                ]
            )
    return path
