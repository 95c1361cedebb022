"""Command-line entry point.

Subcommands: meta-train, evaluate, sweep, coordcheck, tune-adam,
make-dataset, inspect-checkpoint. Every command is deterministic given its
config and seeds: run it twice, get byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import AdamHyper, GridSpec, grid_search
from .coordcheck import emit_coordcheck_csv, run_coordcheck
from .harness import (
    EvalTask,
    adam_spec,
    desk_suite,
    emit_agg_csv,
    emit_csv,
    muadam_spec,
    run_eval,
    sgd_spec,
    spec_from_checkpoint,
    sweep,
)
from .lo import load_checkpoint
from .optimizee import init_mlp, make_gaussian_mixture, sample_batch, save_dataset
from .parametrization import MultiplierSet, ParamMode
from .pes import (
    AdamWConfig,
    MetaTrainConfig,
    OuterSchedule,
    PESConfig,
    TaskSet,
    TaskSpec,
    UpdateRuleConfig,
    meta_train,
)
from .runners import AdamRunner
from .tensor import RngStream

log = logging.getLogger(__name__)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MULO_THREADS")
    return int(env) if env else 1


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s != "")


def _ints(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s != ""]


def _task_from_args(args) -> TaskSpec:
    return TaskSpec(
        width=args.width,
        depth=args.depth,
        input_dim=args.input_dim,
        num_classes=args.num_classes,
        batch_size=args.batch_size,
        dataset_path=args.dataset,
        synthetic_n=args.synthetic_n,
        synthetic_noise=args.noise,
        synthetic_seed=args.data_seed,
    )


def _add_task_args(p: argparse.ArgumentParser, width_list: bool = False) -> None:
    if width_list:
        p.add_argument("--widths", type=_ints, default=[64, 256, 1024])
    else:
        p.add_argument("--width", type=int, default=128)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--dataset", default=None, help="path to a .mlod dataset file")
    p.add_argument("--synthetic-n", type=int, default=10000)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=0)


def _optimizer_from_args(args):
    name = args.optimizer
    if name == "adam":
        return adam_spec(AdamHyper(lr=args.lr), ParamMode(args.mode))
    if name in ("muadam-s", "muadam-m"):
        return muadam_spec(name[-1])
    if name == "muadam":
        hp = AdamHyper(
            lr=args.lr,
            multipliers=MultiplierSet(args.input_mult, args.output_mult, args.hidden_lr_mult),
        )
        return adam_spec(hp, ParamMode.MUP)
    if name == "sgd":
        return sgd_spec(args.lr, ParamMode(args.mode))
    if name == "lo":
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required for --optimizer lo")
        return spec_from_checkpoint(args.checkpoint)
    raise SystemExit(f"unknown optimizer {name!r}")


def _add_optimizer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--optimizer",
        default="muadam-s",
        choices=["adam", "muadam", "muadam-s", "muadam-m", "sgd", "lo"],
    )
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mode", default="sp", choices=["sp", "mup"])
    p.add_argument("--input-mult", type=float, default=1.0)
    p.add_argument("--output-mult", type=float, default=1.0)
    p.add_argument("--hidden-lr-mult", type=float, default=1.0)
    p.add_argument("--checkpoint", default=None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(args) -> int:
    ds = make_gaussian_mixture(
        args.n,
        args.input_dim,
        args.num_classes,
        RngStream(args.seed, stream_id=0xDA7A),
        noise=args.noise,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    log.info("wrote %s (%d samples, dim %d, %d classes)", args.out, ds.n, ds.input_dim, ds.num_classes)
    return 0


def _meta_config_from_json(raw: dict) -> MetaTrainConfig:
    tasks = TaskSet(tuple(TaskSpec(**t) for t in raw.get("tasks", [{"width": 128}])))
    return MetaTrainConfig(
        tasks=tasks,
        mode=ParamMode(raw.get("mode", "mup")),
        pes=PESConfig(**raw.get("pes", {})),
        schedule=OuterSchedule(**raw.get("schedule", {})),
        adamw=AdamWConfig(**raw.get("adamw", {})),
        rule=UpdateRuleConfig(**raw.get("rule", {})),
        feature_eps=raw.get("feature_eps", 1e-8),
        normalize_features=raw.get("normalize_features", True),
        seed=raw.get("seed", 0),
        checkpoint_every=raw.get("checkpoint_every", 500),
        log_every=raw.get("log_every", 50),
    )


def cmd_meta_train(args) -> int:
    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.mode is not None:
        raw["mode"] = args.mode
    if args.steps is not None:
        raw.setdefault("schedule", {})["total_steps"] = args.steps
    cfg = _meta_config_from_json(raw)
    result = meta_train(cfg, out_dir=args.out_dir, resume_path=args.resume)
    log.info("checkpoint: %s", result.checkpoint_path)
    log.info("log: %s", result.log_path)
    return 0


def cmd_evaluate(args) -> int:
    opt = _optimizer_from_args(args)
    task = EvalTask(
        task_id=args.task_id or f"w{args.width}_d{args.depth}_s{args.steps}",
        task=_task_from_args(args),
        steps=args.steps,
        seeds=_seeds(args.seeds),
    )
    cs = run_eval(task, opt)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_csv([cs], out_dir / "curves.csv")
    emit_agg_csv([cs], out_dir / "curves_agg.csv")
    log.info("wrote %s", out_dir / "curves.csv")
    return 0


def cmd_sweep(args) -> int:
    spec_path = args.spec or args.config
    if args.builtin == "desk":
        spec = desk_suite()
    elif spec_path is None:
        raise SystemExit("sweep needs --spec/--config or --builtin")
    else:
        with open(spec_path) as f:
            spec = json.load(f)
    curves, agg = sweep(spec, args.out_dir, threads=_threads(args))
    log.info("wrote %s and %s", curves, agg)
    return 0


def cmd_coordcheck(args) -> int:
    opt = _optimizer_from_args(args)
    task = _task_from_args_widthless(args)
    records = run_coordcheck(
        args.widths,
        opt,
        task,
        args.steps,
        list(_seeds(args.seeds)),
        log_every=args.log_every,
        probe_batch=args.probe_batch,
        std_cap=args.std_cap,
        threads=_threads(args),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = emit_coordcheck_csv(records, out_dir / "coordcheck.csv")
    log.info("wrote %s", path)
    return 0


def _task_from_args_widthless(args) -> TaskSpec:
    return TaskSpec(
        width=args.widths[0],
        depth=args.depth,
        input_dim=args.input_dim,
        num_classes=args.num_classes,
        batch_size=args.batch_size,
        dataset_path=args.dataset,
        synthetic_n=args.synthetic_n,
        synthetic_noise=args.noise,
        synthetic_seed=args.data_seed,
    )


def cmd_tune_adam(args) -> int:
    task = _task_from_args(args)
    ds = task.load()
    seeds = list(_seeds(args.seeds))
    mode = ParamMode(args.mode)
    steps = args.steps
    tail = min(10, steps)

    def evaluate(hp: AdamHyper, seed: int) -> tuple[float, bool]:
        spec = task.mlp_spec(mode, hp.multipliers)
        params = init_mlp(spec, RngStream(seed).child(1))
        runner = AdamRunner(params, hp)
        batch_rng = RngStream(seed).child(2)
        cap = None
        recent: list[float] = []
        for _ in range(steps):
            X, y = sample_batch(ds, task.batch_size, batch_rng)
            loss = runner.step(X, y)
            if cap is None:
                cap = 100.0 * loss if np.isfinite(loss) and loss > 0 else 1e6
            if not np.isfinite(loss) or runner.diverged or loss > cap:
                return cap, True
            recent.append(loss)
            if len(recent) > tail:
                recent.pop(0)
        return float(np.mean(recent)), False

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranked = grid_search(evaluate, GridSpec(), seeds, csv_path=out_dir / "grid.csv")
    best = ranked[0]
    m = best.hp.multipliers
    print(
        f"best config: lr={best.hp.lr} input={m.input_mult} output={m.output_mult} "
        f"hidden_lr={m.hidden_lr_mult} mean_loss={best.mean_loss:.6f}"
    )
    return 0


def cmd_inspect_checkpoint(args) -> int:
    lo, meta = load_checkpoint(args.path)
    flat = lo.flatten()
    info = {
        "flat_dim": int(flat.size),
        "weight_norm": float(np.linalg.norm(flat)),
        "betas": [float(b) for b in lo.betas()],
        "sidecar": meta,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mulo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a synthetic classification dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("meta-train", help="meta-train a learned optimizer")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override outer steps")
    p.add_argument("--mode", default=None, choices=["sp", "mup"])
    p.add_argument("--resume", default=None, help="state.pkl from a previous run")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", help="train an optimizee with a chosen optimizer")
    _add_optimizer_args(p)
    _add_task_args(p)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--task-id", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a cross-product of evaluation cells")
    p.add_argument("--spec", default=None, help="JSON sweep spec")
    p.add_argument("--config", default=None, help="alias for --spec")
    p.add_argument("--builtin", default=None, choices=["desk"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("coordcheck", help="pre-activation drift across widths")
    _add_optimizer_args(p)
    _add_task_args(p, width_list=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--probe-batch", type=int, default=256)
    p.add_argument("--std-cap", type=float, default=1e6)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_coordcheck)

    p = sub.add_parser("tune-adam", help="500-config multiplier grid search")
    _add_task_args(p)
    p.add_argument("--mode", default="mup", choices=["sp", "mup"])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tune_adam)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
