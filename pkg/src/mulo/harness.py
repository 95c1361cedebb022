"""Evaluation harness: optimizer descriptions, multi-seed training curves
with mean/standard-error aggregation, sweep expansion, and the CSV schemas
shared with downstream plotting.

Curve CSV columns: task_id, optimizer, param_mode, width, depth, seed, step,
loss, diverged, ood. The companion aggregate CSV carries mean/SE per logged
step (SE is left empty for single-seed groups).
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import MUADAM_M, MUADAM_S, AdamHyper
from .lo import LOWeights, UpdateRuleConfig, load_checkpoint
from .optimizee import Dataset, init_mlp, sample_batch
from .parametrization import MultiplierSet, ParamMode
from .pes import TaskSpec
from .runners import AdamRunner, LORunner, SGDRunner
from .tensor import RngStream

__all__ = [
    "OptimizerSpec",
    "adam_spec",
    "muadam_spec",
    "sgd_spec",
    "lo_spec",
    "spec_from_checkpoint",
    "EvalTask",
    "Curve",
    "CurveSet",
    "run_single",
    "run_eval",
    "emit_csv",
    "emit_agg_csv",
    "sweep",
    "parse_optimizer",
    "desk_suite",
]

log = logging.getLogger(__name__)

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

AGG_COLUMNS = (
    "task_id",
    "optimizer",
    "param_mode",
    "width",
    "depth",
    "step",
    "mean_loss",
    "se_loss",
    "n_seeds",
)


@dataclass(frozen=True)
class OptimizerSpec:
    """Everything needed to build an inner runner for one optimizer."""

    name: str
    kind: str  # "adam" | "sgd" | "lo"
    mode: ParamMode
    adam: AdamHyper | None = None
    sgd_lr: float | None = None
    lo: LOWeights | None = None
    rule: UpdateRuleConfig | None = None
    feature_eps: float = 1e-8
    normalize_features: bool = True
    meta_unroll: int | None = None  # inner horizon seen at meta-training

    @property
    def multipliers(self) -> MultiplierSet:
        if self.kind == "adam" and self.adam is not None:
            return self.adam.multipliers
        return MultiplierSet()

    def make_runner(self, params):
        if self.kind == "adam":
            return AdamRunner(params, self.adam)
        if self.kind == "sgd":
            return SGDRunner(params, self.sgd_lr)
        if self.kind == "lo":
            return LORunner(
                params,
                self.lo,
                self.rule if self.rule is not None else UpdateRuleConfig(),
                feature_eps=self.feature_eps,
                normalize_features=self.normalize_features,
            )
        raise ValueError(f"unknown optimizer kind {self.kind!r}")


def adam_spec(hp: AdamHyper, mode: ParamMode = ParamMode.SP, name: str | None = None) -> OptimizerSpec:
    default = "muadam" if mode is ParamMode.MUP else "adam"
    return OptimizerSpec(name or default, "adam", mode, adam=hp)


def muadam_spec(preset: str = "s", name: str | None = None) -> OptimizerSpec:
    hp = {"s": MUADAM_S, "m": MUADAM_M}[preset]
    return adam_spec(hp, ParamMode.MUP, name or f"muadam_{preset}")


def sgd_spec(lr: float, mode: ParamMode = ParamMode.SP, name: str = "sgd") -> OptimizerSpec:
    return OptimizerSpec(name, "sgd", mode, sgd_lr=lr)


def lo_spec(
    lo: LOWeights,
    rule: UpdateRuleConfig,
    mode: ParamMode,
    name: str | None = None,
    meta_unroll: int | None = None,
    feature_eps: float = 1e-8,
    normalize_features: bool = True,
) -> OptimizerSpec:
    default = "mulo" if mode is ParamMode.MUP else "lo"
    return OptimizerSpec(
        name or default,
        "lo",
        mode,
        lo=lo,
        rule=rule,
        feature_eps=feature_eps,
        normalize_features=normalize_features,
        meta_unroll=meta_unroll,
    )


def spec_from_checkpoint(path, name: str | None = None) -> OptimizerSpec:
    """Build a read-only evaluation spec from a checkpoint + sidecar."""
    lo, meta = load_checkpoint(path)
    mode = ParamMode(meta.get("param_mode", "mup"))
    rule_meta = meta.get("update_rule", {})
    rule = UpdateRuleConfig(rule_meta.get("lambda1", 0.01), rule_meta.get("lambda2", 0.001))
    fmeta = meta.get("feature_config", {})
    return lo_spec(
        lo,
        rule,
        mode,
        name=name,
        meta_unroll=meta.get("max_unroll"),
        feature_eps=fmeta.get("eps", 1e-8),
        normalize_features=fmeta.get("normalize", True),
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalTask:
    task_id: str
    task: TaskSpec
    steps: int
    seeds: tuple[int, ...]
    log_interval: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")

    def interval(self) -> int:
        # at most ~500 logged points regardless of horizon
        return self.log_interval or max(1, self.steps // 500)


@dataclass
class Curve:
    seed: int
    steps: np.ndarray
    losses: np.ndarray
    diverged: np.ndarray
    ood: np.ndarray


@dataclass
class CurveSet:
    task: EvalTask
    optimizer: str
    param_mode: str
    curves: list[Curve]

    def grid(self) -> np.ndarray:
        return self.curves[0].steps

    def mean(self) -> np.ndarray:
        return np.mean([c.losses for c in self.curves], axis=0)

    def se(self) -> np.ndarray | None:
        if len(self.curves) < 2:
            return None
        stacked = np.stack([c.losses for c in self.curves])
        return stacked.std(axis=0, ddof=1) / np.sqrt(len(self.curves))


def run_single(
    task: EvalTask,
    opt: OptimizerSpec,
    ds: Dataset,
    init_seed: int,
    batch_seed: int,
    cap_factor: float = 100.0,
) -> Curve:
    """Train one seed; divergence caps the curve and freezes training.

    init_seed and batch_seed are independent so seed-isolation experiments
    can hold the initialization fixed while reshuffling batches.
    """
    spec = task.task.mlp_spec(opt.mode, opt.multipliers)
    params = init_mlp(spec, RngStream(init_seed).child(1))
    runner = opt.make_runner(params)
    batch_rng = RngStream(batch_seed).child(2)
    interval = task.interval()

    steps_out, losses_out, div_out = [], [], []
    cap = None
    diverged = False
    for t in range(task.steps):
        X, y = sample_batch(ds, task.task.batch_size, batch_rng)
        if not diverged:
            loss = runner.step(X, y)
            if cap is None:
                cap = cap_factor * loss if np.isfinite(loss) and loss > 0 else 1e6
            if not np.isfinite(loss) or runner.diverged or loss > cap:
                diverged = True
                loss = cap
        else:
            loss = cap
        if t % interval == 0 or t == task.steps - 1:
            steps_out.append(t)
            losses_out.append(float(loss))
            div_out.append(diverged)
    steps_arr = np.asarray(steps_out, dtype=np.int64)
    ood = (
        steps_arr > opt.meta_unroll
        if opt.meta_unroll is not None
        else np.zeros(len(steps_arr), dtype=bool)
    )
    return Curve(
        seed=init_seed,
        steps=steps_arr,
        losses=np.asarray(losses_out),
        diverged=np.asarray(div_out, dtype=bool),
        ood=ood,
    )


def run_eval(task: EvalTask, opt: OptimizerSpec, ds: Dataset | None = None) -> CurveSet:
    """All seeds of one (task, optimizer) cell."""
    if ds is None:
        ds = task.task.load()
    curves = [run_single(task, opt, ds, s, s) for s in task.seeds]
    return CurveSet(task, opt.name, opt.mode.value, curves)


def emit_csv(curve_sets: list[CurveSet], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for cs in curve_sets:
            t = cs.task
            for curve in cs.curves:
                for i in range(len(curve.steps)):
                    w.writerow(
                        [
                            t.task_id,
                            cs.optimizer,
                            cs.param_mode,
                            t.task.width,
                            t.task.depth,
                            curve.seed,
                            int(curve.steps[i]),
                            repr(float(curve.losses[i])),
                            str(bool(curve.diverged[i])).lower(),
                            str(bool(curve.ood[i])).lower(),
                        ]
                    )
    return path


def emit_agg_csv(curve_sets: list[CurveSet], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(AGG_COLUMNS)
        for cs in curve_sets:
            t = cs.task
            mean = cs.mean()
            se = cs.se()
            grid = cs.grid()
            for i in range(len(grid)):
                w.writerow(
                    [
                        t.task_id,
                        cs.optimizer,
                        cs.param_mode,
                        t.task.width,
                        t.task.depth,
                        int(grid[i]),
                        repr(float(mean[i])),
                        "" if se is None else repr(float(se[i])),
                        len(cs.curves),
                    ]
                )
    return path


# ---------------------------------------------------------------------------
# sweeps


_SWEEP_REQUIRED = ("base_task", "widths", "depths", "steps", "seeds", "optimizers")


def parse_optimizer(d: dict) -> OptimizerSpec:
    """Optimizer entry of a sweep spec -> OptimizerSpec."""
    if "kind" not in d:
        raise ValueError("optimizer entry missing field 'kind'")
    kind = d["kind"]
    name = d.get("name")
    if kind == "adam":
        mode = ParamMode(d.get("mode", "sp"))
        hp = AdamHyper(
            lr=d.get("lr", 1e-3),
            multipliers=MultiplierSet(
                d.get("input_mult", 1.0),
                d.get("output_mult", 1.0),
                d.get("hidden_lr_mult", 1.0),
            ),
        )
        return adam_spec(hp, mode, name)
    if kind == "muadam":
        return muadam_spec(d.get("preset", "s"), name)
    if kind == "sgd":
        return sgd_spec(d.get("lr", 0.1), ParamMode(d.get("mode", "sp")), name or "sgd")
    if kind == "lo":
        if "checkpoint" not in d:
            raise ValueError("optimizer entry of kind 'lo' missing field 'checkpoint'")
        return spec_from_checkpoint(d["checkpoint"], name)
    raise ValueError(f"unknown optimizer kind {kind!r} in sweep spec")


def expand_sweep(spec: dict) -> list[tuple[EvalTask, OptimizerSpec]]:
    for key in _SWEEP_REQUIRED:
        if key not in spec:
            raise ValueError(f"sweep spec missing field {key!r}")
    base = TaskSpec(width=1, **{k: v for k, v in spec["base_task"].items()})
    seeds = tuple(int(s) for s in spec["seeds"])
    opts = [parse_optimizer(d) for d in spec["optimizers"]]
    cells = []
    for width in spec["widths"]:
        for depth in spec["depths"]:
            for steps in spec["steps"]:
                task = EvalTask(
                    task_id=f"w{width}_d{depth}_s{steps}",
                    task=replace(base, width=int(width), depth=int(depth)),
                    steps=int(steps),
                    seeds=seeds,
                )
                for opt in opts:
                    cells.append((task, opt))
    return cells


def sweep(spec: dict, out_dir, threads: int = 1) -> tuple[Path, Path]:
    """Expand and run a sweep; returns (curves_csv, aggregate_csv) paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_sweep(spec)
    datasets: dict[tuple, Dataset] = {}
    for task, _ in cells:
        key = (task.task.dataset_path, task.task.input_dim, task.task.num_classes,
               task.task.synthetic_n, task.task.synthetic_noise, task.task.synthetic_seed)
        if key not in datasets:
            datasets[key] = task.task.load()

    def cell_ds(task: EvalTask) -> Dataset:
        key = (task.task.dataset_path, task.task.input_dim, task.task.num_classes,
               task.task.synthetic_n, task.task.synthetic_noise, task.task.synthetic_seed)
        return datasets[key]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_eval, task, opt, cell_ds(task)) for task, opt in cells]
            results = [f.result() for f in futures]  # submission order, not finish order
    else:
        results = [run_eval(task, opt, cell_ds(task)) for task, opt in cells]
    log.info("sweep: %d cells, %d curves", len(cells), sum(len(r.curves) for r in results))
    return (
        emit_csv(results, out_dir / "curves.csv"),
        emit_agg_csv(results, out_dir / "curves_agg.csv"),
    )


def desk_suite(meta_unroll: int = 1000) -> dict:
    """Shape-preserving miniature of the wide/deep/long evaluation grid."""
    return {
        "base_task": {
            "input_dim": 64,
            "num_classes": 10,
            "batch_size": 128,
            "synthetic_n": 20000,
            "synthetic_noise": 1.0,
            "synthetic_seed": 0,
        },
        "widths": [128, 256, 512, 1024],
        "depths": [3, 8, 16],
        "steps": [5 * meta_unroll, 25 * meta_unroll],
        "seeds": [0, 1, 2, 3, 4],
        "optimizers": [
            {"kind": "muadam", "preset": "s"},
            {"kind": "adam", "lr": 0.001},
            {"kind": "sgd", "lr": 0.1},
        ],
    }
