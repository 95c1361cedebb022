"""The learned optimizer: a width-32 two-layer MLP applied per parameter.

Given the 27 features of a single parameter it emits a direction ``d`` and a
log-magnitude ``m``; the weight update is

    w' = w - scale * lambda1 * d * exp(lambda2 * m)

where ``scale`` comes from :func:`mulo.parametrization.update_scale`. The
seven feature-EMA coefficients ride along inside the weights as logits
(sigmoid keeps them in (0,1) while meta-training perturbs them freely), so
the whole optimizer is one flat vector for evolutionary perturbation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureConfig, NUM_FEATURES
from .tensor import RngStream

__all__ = [
    "LO_HIDDEN",
    "FLAT_DIM",
    "LOWeights",
    "UpdateRuleConfig",
    "DEFAULT_BETAS",
    "init_lo",
    "lo_forward",
    "apply_update",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

LO_HIDDEN = 32
N_BETA_LOGITS = 7
# W1 + b1 + W2 + b2 + beta logits
FLAT_DIM = NUM_FEATURES * LO_HIDDEN + LO_HIDDEN + LO_HIDDEN * 2 + 2 + N_BETA_LOGITS

DEFAULT_BETAS = (0.9, 0.99, 0.999, 0.999, 0.9, 0.99, 0.999)

CHECKPOINT_MAGIC = b"MULO"
CHECKPOINT_VERSION = 1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass(frozen=True)
class UpdateRuleConfig:
    """Step-size constants; lambda1 biases initial updates towards small."""

    lambda1: float = 0.01
    lambda2: float = 0.001

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError(f"lambda1/lambda2 must be > 0, got {self}")


@dataclass
class LOWeights:
    w1: np.ndarray  # (27, 32)
    b1: np.ndarray  # (32,)
    w2: np.ndarray  # (32, 2), columns are (d, m)
    b2: np.ndarray  # (2,)
    beta_logits: np.ndarray  # (7,)

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2, self.beta_logits]
        )

    @staticmethod
    def unflatten(vec: np.ndarray) -> "LOWeights":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (FLAT_DIM,):
            raise ValueError(f"expected flat vector of length {FLAT_DIM}, got {vec.shape}")
        o = 0
        w1 = vec[o : o + NUM_FEATURES * LO_HIDDEN].reshape(NUM_FEATURES, LO_HIDDEN).copy()
        o += NUM_FEATURES * LO_HIDDEN
        b1 = vec[o : o + LO_HIDDEN].copy()
        o += LO_HIDDEN
        w2 = vec[o : o + LO_HIDDEN * 2].reshape(LO_HIDDEN, 2).copy()
        o += LO_HIDDEN * 2
        b2 = vec[o : o + 2].copy()
        o += 2
        beta_logits = vec[o:].copy()
        return LOWeights(w1, b1, w2, b2, beta_logits)

    def betas(self) -> np.ndarray:
        return _sigmoid(self.beta_logits)

    def feature_config(self, eps: float = 1e-8, normalize: bool = True) -> FeatureConfig:
        b = self.betas()
        return FeatureConfig(
            momentum_betas=(float(b[0]), float(b[1]), float(b[2])),
            second_moment_beta=float(b[3]),
            adafactor_betas=(float(b[4]), float(b[5]), float(b[6])),
            eps=eps,
            normalize=normalize,
        )


def init_lo(rng: RngStream, weight_std: float = 0.01) -> LOWeights:
    """Small-std Gaussian weights, zero biases, default beta logits."""
    return LOWeights(
        w1=weight_std * rng.child(0).standard_normal((NUM_FEATURES, LO_HIDDEN)),
        b1=np.zeros(LO_HIDDEN),
        w2=weight_std * rng.child(1).standard_normal((LO_HIDDEN, 2)),
        b2=np.zeros(2),
        beta_logits=np.array([_logit(b) for b in DEFAULT_BETAS]),
    )


_FWD_CHUNK = 16384  # keeps the (32, chunk) hidden block cache-resident


def lo_forward_t(
    lo: LOWeights,
    features_t: np.ndarray,
    feature_scale: np.ndarray | None = None,
    out: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Transposed-layout forward: features_t is (27, num_params).

    ``feature_scale`` (per-feature divisors) is folded into the first-layer
    weights, which is how per-tensor feature normalization is applied without
    another pass over the feature matrix. The matmuls run in column chunks so
    the hidden block stays cache-resident; ``out`` reuses a (2, n) buffer.
    """
    w1 = lo.w1 if feature_scale is None else lo.w1 / feature_scale[:, None]
    w1t = np.ascontiguousarray(w1.T)
    w2t = np.ascontiguousarray(lo.w2.T)
    b1 = lo.b1[:, None]
    b2 = lo.b2[:, None]
    n = features_t.shape[1]
    if out is None:
        out = np.empty((2, n))
    hidden = np.empty((LO_HIDDEN, min(_FWD_CHUNK, n)))
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, n, _FWD_CHUNK):
            e = min(s + _FWD_CHUNK, n)
            h = hidden[:, : e - s]
            np.matmul(w1t, features_t[:, s:e], out=h)
            h += b1
            np.maximum(h, 0.0, out=h)
            np.matmul(w2t, h, out=out[:, s:e])
            out[:, s:e] += b2
    return out[1], out[0]


def lo_forward(lo: LOWeights, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the optimizer net independently to every feature row.

    Returns the (m, d) vectors: log-magnitude and direction per parameter.
    """
    return lo_forward_t(lo, np.ascontiguousarray(features.T))


def apply_update(
    w: np.ndarray,
    m: np.ndarray,
    d: np.ndarray,
    cfg: UpdateRuleConfig,
    scale: float,
) -> np.ndarray:
    """w - scale * lambda1 * d * exp(lambda2 * m), elementwise."""
    with np.errstate(over="ignore", invalid="ignore"):
        step = cfg.lambda1 * d.reshape(w.shape) * np.exp(cfg.lambda2 * m.reshape(w.shape))
        return w - scale * step


def save_checkpoint(path, lo: LOWeights, meta: dict | None = None) -> None:
    """Binary flat vector plus a JSON sidecar (same path + ".json")."""
    path = Path(path)
    flat = lo.flatten()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, flat.size))
        f.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
    sidecar = dict(meta or {})
    sidecar.setdefault("flat_dim", flat.size)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[LOWeights, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    header_len = 4 + struct.calcsize("<IQ")
    if len(raw) < header_len or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not an optimizer checkpoint: {path}")
    version, n = struct.unpack("<IQ", raw[4:header_len])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if n != FLAT_DIM:
        raise ValueError(f"checkpoint flat length {n} != expected {FLAT_DIM}")
    flat = np.frombuffer(raw, dtype="<f8", count=n, offset=header_len).astype(np.float64)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    meta = {}
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            meta = json.load(f)
    return LOWeights.unflatten(flat), meta
