"""Width-scaling rules for the two supported parametrizations.

Three pure functions govern how a weight tensor of a given layer role is
treated: ``init_std`` (initialization standard deviation),
``forward_multiplier`` (constant applied to the pre-activation in the
forward pass), and ``update_scale`` (per-layer rescaling of optimizer
updates). ``SP`` is conventional fan-in practice with no multipliers and no
update rescaling; ``MUP`` uses fan-in init for input/hidden weights,
unit-variance init for output weights, a 1/fan_in output pre-activation
multiplier, and a 1/fan_in hidden update scale.

Note on the init rule: we read "spread parameter s" of a Gaussian init as
the standard deviation (variance s^2). The alternative reading (s as the
variance) is available through ``init_variance_mode`` for ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

__all__ = [
    "ParamMode",
    "LayerRole",
    "LayerGeometry",
    "MultiplierSet",
    "init_std",
    "forward_multiplier",
    "update_scale",
]


class ParamMode(Enum):
    SP = "sp"
    MUP = "mup"


class LayerRole(Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"


@dataclass(frozen=True)
class LayerGeometry:
    """fan_in/fan_out of one weight matrix (rows = fan_in, cols = fan_out)."""

    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError(f"layer geometry must be >= 1, got {self}")


@dataclass(frozen=True)
class MultiplierSet:
    """Tunable constants layered on top of the MUP rules.

    ``input_mult`` and ``output_mult`` scale the input/output pre-activation
    multipliers; ``hidden_lr_mult`` scales the hidden-layer learning rate of
    hand-designed optimizers (learned optimizers keep all three at 1).
    """

    input_mult: float = 1.0
    output_mult: float = 1.0
    hidden_lr_mult: float = 1.0

    def __post_init__(self):
        for name in ("input_mult", "output_mult", "hidden_lr_mult"):
            v = getattr(self, name)
            if not (v > 0):
                raise ValueError(f"{name} must be > 0, got {v}")


def init_std(
    role: LayerRole,
    geom: LayerGeometry,
    mode: ParamMode,
    init_variance_mode: bool = False,
) -> float:
    """Initialization standard deviation for a weight tensor."""
    if mode is ParamMode.MUP and role is LayerRole.OUTPUT:
        return 1.0
    std = 1.0 / math.sqrt(geom.fan_in)
    if init_variance_mode and mode is ParamMode.MUP:
        # alternative reading: 1/sqrt(fan_in) as the variance
        std = math.sqrt(std)
    return std


def forward_multiplier(
    role: LayerRole,
    geom: LayerGeometry,
    mode: ParamMode,
    tunables: MultiplierSet | None = None,
) -> float:
    """Constant multiplying the pre-activation (W h + b) in the forward pass."""
    tunables = tunables if tunables is not None else MultiplierSet()
    if mode is ParamMode.SP:
        return 1.0
    if role is LayerRole.OUTPUT:
        return tunables.output_mult / geom.fan_in
    if role is LayerRole.INPUT:
        return tunables.input_mult
    return 1.0


def update_scale(role: LayerRole, geom: LayerGeometry, mode: ParamMode) -> float:
    """Per-layer rescaling of optimizer updates (1/fan_in for MUP hidden)."""
    if mode is ParamMode.MUP and role is LayerRole.HIDDEN:
        return 1.0 / geom.fan_in
    return 1.0
