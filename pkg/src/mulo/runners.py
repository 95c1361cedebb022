"""Inner-loop runners: one object per training run that owns the optimizee,
optimizer state, and divergence bookkeeping.

Shared by meta-training truncations, the evaluation harness and the
coordinate check. ``step`` consumes one batch and returns the loss measured
at the *current* weights (before the update). Once diverged, a runner stays
inert and keeps returning NaN.
"""

from __future__ import annotations

import numpy as np

from .baselines import AdamHyper, AdamState, adam_step, sgd_step
from .features import (
    NUM_FEATURES,
    FeatureConfig,
    feature_block_t,
    feature_scale_t,
    init_state,
    update_state,
)
from .lo import LOWeights, UpdateRuleConfig, apply_update, lo_forward_t
from .optimizee import OptimizeeParams, backward, forward
from .parametrization import update_scale

__all__ = ["LORunner", "AdamRunner", "SGDRunner"]


class _BaseRunner:
    params: OptimizeeParams
    diverged: bool

    def _post_update_check(self) -> None:
        if not self.params.all_finite():
            self.diverged = True

    def loss_on(self, X: np.ndarray, y: np.ndarray) -> float:
        """Pure evaluation forward; never mutates state."""
        return forward(self.params, X, y).loss


class LORunner(_BaseRunner):
    """Applies a learned optimizer to every parameter of the optimizee."""

    def __init__(
        self,
        params: OptimizeeParams,
        lo: LOWeights,
        rule: UpdateRuleConfig,
        feature_eps: float = 1e-8,
        normalize_features: bool = True,
        fixed_betas: FeatureConfig | None = None,
    ):
        self.params = params
        self.rule = rule
        self.feature_eps = feature_eps
        self.normalize_features = normalize_features
        self.fixed_betas = fixed_betas
        self.state = init_state(params)
        mode = params.spec.mode
        self.scales = [
            1.0 if meta.is_bias else update_scale(meta.role, meta.geom, mode)
            for meta in params.metas()
        ]
        # reusable per-tensor buffers; fresh 56MB allocations every step are
        # dominated by page faults at realistic widths
        self._fbufs = [np.empty((NUM_FEATURES, a.size)) for a in params.arrays()]
        self._obufs = [np.empty((2, a.size)) for a in params.arrays()]
        self.diverged = False
        self.set_weights(lo)

    def set_weights(self, lo: LOWeights) -> None:
        self.lo = lo
        if self.fixed_betas is not None:
            self.fcfg = self.fixed_betas
        else:
            self.fcfg = lo.feature_config(self.feature_eps, self.normalize_features)

    def step(self, X: np.ndarray, y: np.ndarray) -> float:
        if self.diverged:
            return float("nan")
        rec = forward(self.params, X, y)
        if rec.diverged:
            self.diverged = True
            return rec.loss
        grads = backward(self.params, rec, X, y)
        update_state(self.state, grads, self.fcfg)
        arrays = self.params.arrays()
        new_arrays = []
        for i, (ts, a, g, scale) in enumerate(zip(self.state, arrays, grads, self.scales)):
            F = feature_block_t(ts, a, g, self.fcfg, normalize=False, out=self._fbufs[i])
            fscale = feature_scale_t(F, self.fcfg.eps) if self.fcfg.normalize else None
            m, d = lo_forward_t(self.lo, F, feature_scale=fscale, out=self._obufs[i])
            new_arrays.append(apply_update(a, m, d, self.rule, scale))
        self.params.set_arrays(new_arrays)
        self._post_update_check()
        return rec.loss


class AdamRunner(_BaseRunner):
    def __init__(self, params: OptimizeeParams, hp: AdamHyper):
        self.params = params
        self.hp = hp
        self.state = AdamState.for_params(params)
        self.diverged = False

    def step(self, X: np.ndarray, y: np.ndarray) -> float:
        if self.diverged:
            return float("nan")
        rec = forward(self.params, X, y)
        if rec.diverged:
            self.diverged = True
            return rec.loss
        grads = backward(self.params, rec, X, y)
        adam_step(self.state, self.params, grads, self.hp, self.params.spec.mode)
        self._post_update_check()
        return rec.loss


class SGDRunner(_BaseRunner):
    def __init__(self, params: OptimizeeParams, lr: float):
        self.params = params
        self.lr = lr
        self.diverged = False

    def step(self, X: np.ndarray, y: np.ndarray) -> float:
        if self.diverged:
            return float("nan")
        rec = forward(self.params, X, y)
        if rec.diverged:
            self.diverged = True
            return rec.loss
        grads = backward(self.params, rec, X, y)
        sgd_step(self.params, grads, self.lr)
        self._post_update_check()
        return rec.loss
