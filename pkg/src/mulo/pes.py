"""Meta-training: persistent evolutionary-strategies gradient estimation over
the flat optimizer vector, an AdamW outer loop with warmup+cosine schedule,
and multi-task episode sampling.

The estimator is generic over the inner problem through three callbacks, so
the same algebra that meta-trains learned optimizers is testable on analytic
meta-objectives:

    make_state(rng)                      fresh inner state for an episode
    unroll(phi, state, data_rng, k)      k inner steps -> (mean_loss, diverged)
    probe_loss(state, rng)               loss of a fresh state (sets the
                                         episode's divergence cap; must not
                                         mutate the state)

Each particle pair keeps two persistent inner states (unrolled with phi+eps
and phi-eps histories) and the running sum xi of every perturbation sampled
since its episode started. One truncation produces the estimate

    ghat = (1/N) sum_i  xi_i * (L_i_plus - L_i_minus) / (2 sigma^2)

with both members of a pair consuming identical batch streams. A pair is
reset (fresh state, xi = 0) when its episode reaches the max unroll length
or either member diverges; diverged truncation losses enter the estimate at
the episode's cap value (cap_factor times the episode's initial loss).
"""

from __future__ import annotations

import csv
import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .lo import FLAT_DIM, LOWeights, UpdateRuleConfig, init_lo, save_checkpoint
from .optimizee import Dataset, MLPSpec, init_mlp, load_dataset, make_gaussian_mixture, sample_batch
from .parametrization import MultiplierSet, ParamMode
from .runners import LORunner
from .tensor import RngStream

__all__ = [
    "PESConfig",
    "PesEstimator",
    "PesResult",
    "pes_pair_contribution",
    "OuterSchedule",
    "AdamWConfig",
    "AdamWState",
    "clip_by_norm",
    "outer_step",
    "TaskSpec",
    "TaskSet",
    "MetaTrainConfig",
    "MetaTrainResult",
    "meta_train",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PESConfig:
    num_pairs: int = 8
    sigma: float = 0.01
    trunc_len: int = 50
    max_unroll: int = 1000
    loss_cap_factor: float = 100.0
    fallback_cap: float = 1e6
    trunc_schedule: str = "fixed"  # "fixed" or "linear" growth to trunc_len

    def __post_init__(self):
        if self.num_pairs < 1:
            raise ValueError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if not (self.sigma > 0):
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not (1 <= self.trunc_len <= self.max_unroll):
            raise ValueError(
                f"need 1 <= trunc_len <= max_unroll, got K={self.trunc_len} T={self.max_unroll}"
            )
        if self.trunc_schedule not in ("fixed", "linear"):
            raise ValueError(f"unknown trunc_schedule {self.trunc_schedule!r}")


def pes_pair_contribution(
    xi: np.ndarray, eps: np.ndarray, loss_plus: float, loss_minus: float, sigma: float
) -> np.ndarray:
    """Single-pair estimate term: (xi + eps) * (L+ - L-) / (2 sigma^2)."""
    return (xi + eps) * ((loss_plus - loss_minus) / (2.0 * sigma * sigma))


@dataclass
class _ParticlePair:
    index: int
    root: RngStream
    plus: object = None
    minus: object = None
    xi: np.ndarray | None = None
    cap: float = 0.0
    inner_step: int = 0
    episode: int = 0
    trunc_in_episode: int = 0
    total_truncs: int = 0


@dataclass
class PesResult:
    grad: np.ndarray
    mean_loss: float
    diverged_pairs: int
    resets: int


class PesEstimator:
    """Persistent-ES meta-gradient estimator over a flat parameter vector.

    Pair evaluation order does not matter: every stream a pair touches is a
    child of that pair's own root, and the reduction over pairs is an
    ordered sum by pair index.
    """

    def __init__(
        self,
        dim: int,
        cfg: PESConfig,
        rng: RngStream,
        make_state: Callable[[RngStream], object],
        unroll: Callable[[np.ndarray, object, RngStream, int], tuple[float, bool]],
        probe_loss: Callable[[object, RngStream], float] | None = None,
        total_outer: int | None = None,
        eps_sampler: Callable[["_ParticlePair"], np.ndarray] | None = None,
    ):
        self.dim = dim
        self.cfg = cfg
        self.total_outer = total_outer
        self.outer_t = 0
        self.make_state = make_state
        self.unroll = unroll
        self.probe_loss = probe_loss
        self.eps_sampler = eps_sampler
        self.pairs = [_ParticlePair(i, rng.child(i)) for i in range(cfg.num_pairs)]
        for pair in self.pairs:
            self._reset_pair(pair)

    def rebind(
        self,
        make_state,
        unroll,
        probe_loss=None,
        eps_sampler=None,
    ) -> None:
        """Re-attach callbacks after unpickling."""
        self.make_state = make_state
        self.unroll = unroll
        self.probe_loss = probe_loss
        self.eps_sampler = eps_sampler

    def __getstate__(self):
        state = self.__dict__.copy()
        for name in ("make_state", "unroll", "probe_loss", "eps_sampler"):
            state[name] = None
        return state

    def _episode_rng(self, pair: _ParticlePair) -> RngStream:
        return pair.root.child(1).child(pair.episode)

    def _reset_pair(self, pair: _ParticlePair) -> None:
        ep = self._episode_rng(pair)
        # same child label twice -> bit-identical init for both members
        pair.plus = self.make_state(ep.child(0))
        pair.minus = self.make_state(ep.child(0))
        pair.xi = np.zeros(self.dim)
        pair.inner_step = 0
        pair.trunc_in_episode = 0
        cap = self.cfg.fallback_cap
        if self.probe_loss is not None:
            first = self.probe_loss(pair.plus, ep.child(2))
            if np.isfinite(first) and first > 0:
                cap = self.cfg.loss_cap_factor * float(first)
        pair.cap = cap

    def _sample_eps(self, pair: _ParticlePair) -> np.ndarray:
        if self.eps_sampler is not None:
            return self.eps_sampler(pair)
        stream = pair.root.child(0).child(pair.total_truncs)
        return self.cfg.sigma * stream.standard_normal(self.dim)

    def _k_now(self) -> int:
        if self.cfg.trunc_schedule == "linear" and self.total_outer:
            frac = (self.outer_t + 1) / self.total_outer
            return max(1, math.ceil(self.cfg.trunc_len * frac))
        return self.cfg.trunc_len

    def _run_pair(self, pair: _ParticlePair, phi: np.ndarray, k: int):
        """One truncation for one pair; returns its estimate contribution."""
        eps = self._sample_eps(pair)
        data_a = pair.root.child(1).child(pair.episode).child(3).child(pair.trunc_in_episode)
        data_b = pair.root.child(1).child(pair.episode).child(3).child(pair.trunc_in_episode)
        loss_p, div_p = self.unroll(phi + eps, pair.plus, data_a, k)
        loss_m, div_m = self.unroll(phi - eps, pair.minus, data_b, k)
        div_p = bool(div_p) or not np.isfinite(loss_p) or loss_p > pair.cap
        div_m = bool(div_m) or not np.isfinite(loss_m) or loss_m > pair.cap
        if div_p:
            loss_p = pair.cap
        if div_m:
            loss_m = pair.cap
        contrib = pes_pair_contribution(pair.xi, eps, loss_p, loss_m, self.cfg.sigma)
        pair.xi += eps
        pair.inner_step += k
        pair.trunc_in_episode += 1
        pair.total_truncs += 1
        diverged = div_p or div_m
        needs_reset = diverged or pair.inner_step >= self.cfg.max_unroll
        return contrib, loss_p, loss_m, diverged, needs_reset

    def truncation(self, phi: np.ndarray) -> PesResult:
        """Advance every pair by one truncation and reduce to one estimate."""
        phi = np.asarray(phi, dtype=np.float64)
        k = self._k_now()
        total = np.zeros(self.dim)
        losses = []
        diverged_pairs = 0
        resets = 0
        for pair in self.pairs:
            contrib, loss_p, loss_m, diverged, needs_reset = self._run_pair(pair, phi, k)
            total += contrib
            losses.append(0.5 * (loss_p + loss_m))
            if diverged:
                diverged_pairs += 1
            if needs_reset:
                pair.episode += 1
                self._reset_pair(pair)
                resets += 1
        self.outer_t += 1
        return PesResult(total / len(self.pairs), float(np.mean(losses)), diverged_pairs, resets)


# ---------------------------------------------------------------------------
# outer optimizer


@dataclass(frozen=True)
class OuterSchedule:
    """Linear warmup to max_lr, then cosine anneal to final_lr."""

    max_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 5000
    final_lr: float = 1e-3
    clip_norm: float = 1.0

    def __post_init__(self):
        if not (self.max_lr > 0 and self.final_lr > 0):
            raise ValueError("learning rates must be > 0")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need warmup_steps < total_steps, got {self.warmup_steps} >= {self.total_steps}"
            )

    def lr_at(self, t: int) -> float:
        if t < self.warmup_steps:
            return self.max_lr * t / self.warmup_steps if self.warmup_steps else self.max_lr
        if t >= self.total_steps:
            return self.final_lr
        span = self.total_steps - 1 - self.warmup_steps
        if span <= 0:
            return self.max_lr
        p = (t - self.warmup_steps) / span
        return self.final_lr + 0.5 * (self.max_lr - self.final_lr) * (1.0 + math.cos(math.pi * p))


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(dim: int) -> "AdamWState":
        return AdamWState(np.zeros(dim), np.zeros(dim))


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > max_norm > 0:
        return g * (max_norm / norm)
    return g


def outer_step(
    phi: np.ndarray,
    ghat: np.ndarray,
    state: AdamWState,
    schedule: OuterSchedule,
    adamw: AdamWConfig,
    t: int,
) -> tuple[np.ndarray, AdamWState]:
    """Clipped AdamW update with the scheduled learning rate at step t."""
    lr = schedule.lr_at(t)
    g = clip_by_norm(np.asarray(ghat, dtype=np.float64), schedule.clip_norm)
    state.t += 1
    state.m = adamw.beta1 * state.m + (1.0 - adamw.beta1) * g
    state.v = adamw.beta2 * state.v + (1.0 - adamw.beta2) * g * g
    m_hat = state.m / (1.0 - adamw.beta1**state.t)
    v_hat = state.v / (1.0 - adamw.beta2**state.t)
    new_phi = phi - lr * (m_hat / (np.sqrt(v_hat) + adamw.eps) + adamw.weight_decay * phi)
    return new_phi, state


# ---------------------------------------------------------------------------
# tasks and the meta-training loop


@dataclass(frozen=True)
class TaskSpec:
    """One inner task: an MLP shape plus the dataset it trains on."""

    width: int
    depth: int = 3
    input_dim: int = 64
    num_classes: int = 10
    batch_size: int = 128
    dataset_path: str | None = None
    synthetic_n: int = 10000
    synthetic_noise: float = 1.0
    synthetic_seed: int = 0

    def mlp_spec(self, mode: ParamMode, multipliers: MultiplierSet | None = None) -> MLPSpec:
        return MLPSpec(
            input_dim=self.input_dim,
            hidden_width=self.width,
            depth=self.depth,
            num_classes=self.num_classes,
            mode=mode,
            multipliers=multipliers if multipliers is not None else MultiplierSet(),
        )

    def load(self) -> Dataset:
        if self.dataset_path is not None:
            ds = load_dataset(self.dataset_path)
            if ds.input_dim != self.input_dim or ds.num_classes != self.num_classes:
                raise ValueError(
                    f"dataset {self.dataset_path} has (input_dim={ds.input_dim}, "
                    f"classes={ds.num_classes}), task wants ({self.input_dim}, {self.num_classes})"
                )
            return ds
        return make_gaussian_mixture(
            self.synthetic_n,
            self.input_dim,
            self.num_classes,
            RngStream(self.synthetic_seed, stream_id=0xDA7A),
            noise=self.synthetic_noise,
        )


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("task set must be non-empty")


@dataclass
class _InnerState:
    runner: LORunner
    ds: Dataset
    batch_size: int


@dataclass
class MetaTrainConfig:
    tasks: TaskSet
    mode: ParamMode = ParamMode.MUP
    pes: PESConfig = field(default_factory=PESConfig)
    schedule: OuterSchedule = field(default_factory=OuterSchedule)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    rule: UpdateRuleConfig = field(default_factory=UpdateRuleConfig)
    feature_eps: float = 1e-8
    normalize_features: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50


@dataclass
class MetaTrainResult:
    lo: LOWeights
    log_rows: list[tuple]
    checkpoint_path: Path | None
    log_path: Path | None


LOG_COLUMNS = ("outer_step", "lr", "mean_inner_loss", "grad_norm", "diverged_pairs")


def _checkpoint_meta(cfg: MetaTrainConfig) -> dict:
    return {
        "param_mode": cfg.mode.value,
        "update_rule": {"lambda1": cfg.rule.lambda1, "lambda2": cfg.rule.lambda2},
        "feature_config": {
            "eps": cfg.feature_eps,
            "normalize": cfg.normalize_features,
            "betas": "meta-learned (stored as logits in the flat vector)",
        },
        "max_unroll": cfg.pes.max_unroll,
        "outer_steps": cfg.schedule.total_steps,
        "tasks": [
            {"width": t.width, "depth": t.depth, "input_dim": t.input_dim,
             "num_classes": t.num_classes, "batch_size": t.batch_size}
            for t in cfg.tasks.tasks
        ],
        "seed": cfg.seed,
    }


def make_inner_callbacks(cfg: MetaTrainConfig, datasets: list[Dataset]):
    """(make_state, unroll, probe_loss) closures for the LO inner problem."""
    tasks = cfg.tasks.tasks
    zero_lo = LOWeights.unflatten(np.zeros(FLAT_DIM))

    def make_state(rng: RngStream) -> _InnerState:
        ti = int(rng.child(0).integers(0, len(tasks)))
        task = tasks[ti]
        params = init_mlp(task.mlp_spec(cfg.mode), rng.child(1))
        runner = LORunner(
            params,
            zero_lo,
            cfg.rule,
            feature_eps=cfg.feature_eps,
            normalize_features=cfg.normalize_features,
        )
        return _InnerState(runner, datasets[ti], task.batch_size)

    def unroll(phi: np.ndarray, st: _InnerState, data_rng: RngStream, k: int):
        st.runner.set_weights(LOWeights.unflatten(phi))
        total = 0.0
        for _ in range(k):
            X, y = sample_batch(st.ds, st.batch_size, data_rng)
            loss = st.runner.step(X, y)
            if not np.isfinite(loss) or st.runner.diverged:
                return float("nan"), True
            total += loss
        return total / k, False

    def probe_loss(st: _InnerState, rng: RngStream) -> float:
        X, y = sample_batch(st.ds, st.batch_size, rng)
        return st.runner.loss_on(X, y)

    return make_state, unroll, probe_loss


def meta_train(
    cfg: MetaTrainConfig,
    out_dir=None,
    resume_path=None,
    stop_after: int | None = None,
) -> MetaTrainResult:
    """Run the outer loop; writes checkpoint + log CSV when out_dir is given.

    A resume pickle (state.pkl in out_dir) captures the full meta-state;
    restarting from it reproduces the original run bit-for-bit. ``stop_after``
    pauses the run at an outer step without altering the schedule.
    """
    datasets = [t.load() for t in cfg.tasks.tasks]
    make_state, unroll, probe = make_inner_callbacks(cfg, datasets)

    if resume_path is not None:
        with open(resume_path, "rb") as f:
            snap = pickle.load(f)
        phi = snap["phi"]
        adamw_state = snap["adamw_state"]
        estimator = snap["estimator"]
        estimator.rebind(make_state, unroll, probe)
        start_t = snap["t"]
        log_rows = snap["log_rows"]
    else:
        root = RngStream(cfg.seed)
        phi = init_lo(root.child(0)).flatten()
        estimator = PesEstimator(
            FLAT_DIM,
            cfg.pes,
            root.child(1),
            make_state,
            unroll,
            probe,
            total_outer=cfg.schedule.total_steps,
        )
        adamw_state = AdamWState.zeros(FLAT_DIM)
        start_t = 0
        log_rows = []

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "lo_checkpoint.mulo" if out_dir else None
    log_path = out_dir / "meta_train_log.csv" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def save_all(step: int) -> None:
        if not out_dir:
            return
        meta = _checkpoint_meta(cfg)
        meta["completed_outer_steps"] = step
        save_checkpoint(ckpt_path, LOWeights.unflatten(phi), meta)
        with open(out_dir / "state.pkl", "wb") as f:
            pickle.dump(
                {
                    "phi": phi,
                    "adamw_state": adamw_state,
                    "estimator": estimator,
                    "t": step,
                    "log_rows": log_rows,
                },
                f,
            )
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for row in log_rows:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])

    t_start = time.monotonic()
    end_t = cfg.schedule.total_steps if stop_after is None else min(stop_after, cfg.schedule.total_steps)
    for t in range(start_t, end_t):
        res = estimator.truncation(phi)
        grad_norm = float(np.linalg.norm(res.grad))
        phi, adamw_state = outer_step(phi, res.grad, adamw_state, cfg.schedule, cfg.adamw, t)
        log_rows.append((t, cfg.schedule.lr_at(t), res.mean_loss, grad_norm, res.diverged_pairs))
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            log.info(
                "outer %d/%d loss=%.4f |g|=%.3g diverged=%d elapsed=%.0fs",
                t + 1,
                cfg.schedule.total_steps,
                res.mean_loss,
                grad_norm,
                res.diverged_pairs,
                time.monotonic() - t_start,
            )
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_all(t + 1)
    save_all(end_t)
    return MetaTrainResult(LOWeights.unflatten(phi), log_rows, ckpt_path, log_path)
