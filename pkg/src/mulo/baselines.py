"""Hand-designed optimizers (Adam, its width-robust variant, SGD) and the
500-configuration grid-search tuner.

The width-robust Adam variant keeps the standard bias-corrected update but
multiplies the per-layer learning rate by ``update_scale`` and, for hidden
weights, by the tunable hidden-LR multiplier; the input/output forward
multipliers live in the optimizee and are tuned through the same
:class:`MultiplierSet`.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optimizee import OptimizeeParams
from .parametrization import LayerRole, MultiplierSet, ParamMode, update_scale

__all__ = [
    "AdamHyper",
    "AdamState",
    "adam_step",
    "sgd_step",
    "MUADAM_S",
    "MUADAM_M",
    "GridSpec",
    "GridResult",
    "grid_search",
]


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    multipliers: MultiplierSet = field(default_factory=MultiplierSet)

    def __post_init__(self):
        if not (self.lr > 0):
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for b in (self.beta1, self.beta2):
            if not (0.0 < b < 1.0):
                raise ValueError(f"adam betas must lie in (0,1), got {b}")


# Tuned defaults for the width-robust Adam baselines (narrow / wide tuning).
MUADAM_S = AdamHyper(lr=0.1, multipliers=MultiplierSet(0.0625, 0.25, 4.0))
MUADAM_M = AdamHyper(lr=0.1, multipliers=MultiplierSet(0.25, 0.25, 4.0))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: OptimizeeParams) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
        )


def _effective_lr(hp: AdamHyper, role: LayerRole, geom, mode: ParamMode, is_bias: bool) -> float:
    if is_bias:
        return hp.lr  # biases are width-independent; no rescaling
    lr = hp.lr * update_scale(role, geom, mode)
    if mode is ParamMode.MUP and role is LayerRole.HIDDEN:
        lr *= hp.multipliers.hidden_lr_mult
    return lr


def adam_step(
    state: AdamState,
    params: OptimizeeParams,
    grads: list[np.ndarray],
    hp: AdamHyper,
    mode: ParamMode,
) -> tuple[OptimizeeParams, AdamState]:
    """One bias-corrected Adam step, in place; returns (params, state)."""
    state.t += 1
    bc1 = 1.0 - hp.beta1**state.t
    bc2 = 1.0 - hp.beta2**state.t
    arrays = params.arrays()
    metas = params.metas()
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (a, g, meta) in enumerate(zip(arrays, grads, metas)):
            state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g
            state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g
            m_hat = state.m[i] / bc1
            v_hat = state.v[i] / bc2
            lr = _effective_lr(hp, meta.role, meta.geom, mode, meta.is_bias)
            a -= lr * m_hat / (np.sqrt(v_hat) + hp.eps)
            if hp.weight_decay > 0:
                a -= lr * hp.weight_decay * a
    return params, state


def sgd_step(
    params: OptimizeeParams, grads: list[np.ndarray], lr: float
) -> OptimizeeParams:
    """Plain gradient descent (no width-aware rescaling)."""
    for a, g in zip(params.arrays(), grads):
        a -= lr * g
    return params


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSpec:
    """Cross product of learning rates and the three multipliers."""

    lrs: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    input_mults: tuple[float, ...] = (2**-4, 2**-2, 1.0, 2**2, 2**4)
    output_mults: tuple[float, ...] = (2**-4, 2**-2, 1.0, 2**2, 2**4)
    hidden_lr_mults: tuple[float, ...] = (2**-4, 2**-2, 1.0, 2**2, 2**4)

    def configs(self) -> list[AdamHyper]:
        if not (self.lrs and self.input_mults and self.output_mults and self.hidden_lr_mults):
            raise ValueError("grid must be non-empty along every axis")
        out = []
        for lr, im, om, hm in itertools.product(
            self.lrs, self.input_mults, self.output_mults, self.hidden_lr_mults
        ):
            out.append(AdamHyper(lr=lr, multipliers=MultiplierSet(im, om, hm)))
        return out


@dataclass
class GridResult:
    config_id: int
    hp: AdamHyper
    seed_losses: list[float]
    seed_diverged: list[bool]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.seed_losses))

    @property
    def all_diverged(self) -> bool:
        return all(self.seed_diverged)

    def sort_key(self):
        m = self.hp.multipliers
        return (
            self.all_diverged,
            self.mean_loss,
            (self.hp.lr, m.input_mult, m.output_mult, m.hidden_lr_mult),
        )


def grid_search(
    evaluate: Callable[[AdamHyper, int], tuple[float, bool]],
    grid: GridSpec,
    seeds: Sequence[int],
    csv_path=None,
) -> list[GridResult]:
    """Rank every grid config by mean final loss over seeds.

    ``evaluate(hp, seed)`` returns (final_loss, diverged); diverged runs must
    already carry the cap value so means stay finite. Fully diverged configs
    rank last; exact ties break towards the lexicographically smallest
    (lr, input, output, hidden) tuple.
    """
    results = []
    for cid, hp in enumerate(grid.configs()):
        losses, divs = [], []
        for seed in seeds:
            loss, diverged = evaluate(hp, seed)
            losses.append(float(loss))
            divs.append(bool(diverged))
        results.append(GridResult(cid, hp, losses, divs))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                [
                    "config_id",
                    "lr",
                    "input_mult",
                    "output_mult",
                    "hidden_lr_mult",
                    "seed",
                    "final_loss",
                    "diverged",
                ]
            )
            for res in results:
                m = res.hp.multipliers
                for seed, loss, div in zip(seeds, res.seed_losses, res.seed_diverged):
                    w.writerow(
                        [
                            res.config_id,
                            repr(res.hp.lr),
                            repr(m.input_mult),
                            repr(m.output_mult),
                            repr(m.hidden_lr_mult),
                            seed,
                            repr(loss),
                            str(div).lower(),
                        ]
                    )
    return sorted(results, key=GridResult.sort_key)
