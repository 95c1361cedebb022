"""Per-parameter accumulator state and the 27-column feature matrix.

Every weight tensor carries three gradient momenta, one second-moment EMA,
and three pairs of factored row/column second-moment accumulators at three
timescales. Vectors (biases) are treated as single-column matrices so the
row/column machinery degenerates consistently.

Factored normalization convention: for a nonnegative second-moment-like
matrix A with row means R, column means C and global mean mu,

    row_factor    = 1 / sqrt(R / mu + eps)        (broadcast over columns)
    column_factor = 1 / sqrt(C / mu + eps)        (broadcast over rows)

i.e. the rank-1 factorization of A normalized by the mean of row means
(mu == mean(R) == mean(C)). The accumulated normalized gradient uses the
factors of the dense second moment v_t; the per-timescale features use the
factors of the (r_i, c_i) accumulator pairs.

Fixed column order (the stable contract for golden files and checkpoints):

     0      parameter value w
     1-3    momenta m_1..m_3
     4      second moment v
     5-7    m_i / sqrt(v + eps)
     8      1 / sqrt(v + eps)
     9-11   g * row_factor(r_i) * column_factor(c_i)
    12-14   r_i, tiled across columns
    15-17   c_i, tiled across rows
    18-20   1 / sqrt(r_i + eps), tiled
    21-23   1 / sqrt(c_i + eps), tiled
    24-26   m_i * row_factor(r_i) * column_factor(c_i)

With ``normalize`` on, each column is divided per-tensor by its
root-mean-square, clamped below by eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optimizee import OptimizeeParams

__all__ = [
    "NUM_FEATURES",
    "FEATURE_COLUMNS",
    "FeatureConfig",
    "TensorFeatureState",
    "init_state",
    "update_state",
    "feature_block",
    "feature_block_t",
    "feature_scale_t",
    "feature_matrix",
]

NUM_FEATURES = 27

FEATURE_COLUMNS = (
    ["w"]
    + [f"m{i}" for i in (1, 2, 3)]
    + ["v"]
    + [f"m{i}_rsqrt_v" for i in (1, 2, 3)]
    + ["rsqrt_v"]
    + [f"g_fac{i}" for i in (1, 2, 3)]
    + [f"row{i}" for i in (1, 2, 3)]
    + [f"col{i}" for i in (1, 2, 3)]
    + [f"rsqrt_row{i}" for i in (1, 2, 3)]
    + [f"rsqrt_col{i}" for i in (1, 2, 3)]
    + [f"m{i}_fac{i}" for i in (1, 2, 3)]
)


@dataclass(frozen=True)
class FeatureConfig:
    """EMA coefficients and numerics for feature extraction.

    The seven betas are meta-learned in practice (stored as logits inside
    the learned-optimizer weights); the defaults below are their pre-training
    values.
    """

    momentum_betas: tuple[float, float, float] = (0.9, 0.99, 0.999)
    second_moment_beta: float = 0.999
    adafactor_betas: tuple[float, float, float] = (0.9, 0.99, 0.999)
    eps: float = 1e-8
    normalize: bool = True

    def __post_init__(self):
        for b in (*self.momentum_betas, self.second_moment_beta, *self.adafactor_betas):
            if not (0.0 < b < 1.0):
                raise ValueError(f"beta coefficients must lie in (0,1), got {b}")
        if not (self.eps > 0):
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class TensorFeatureState:
    m: np.ndarray  # (3, rows, cols)
    v: np.ndarray  # (rows, cols)
    r: np.ndarray  # (3, rows)
    c: np.ndarray  # (3, cols)


def _as2d(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a.reshape(-1, 1)


def init_state(params: OptimizeeParams) -> list[TensorFeatureState]:
    """All-zero accumulators, one state per tensor in canonical order."""
    out = []
    for a in params.arrays():
        rows, cols = _as2d(a).shape
        out.append(
            TensorFeatureState(
                m=np.zeros((3, rows, cols)),
                v=np.zeros((rows, cols)),
                r=np.zeros((3, rows)),
                c=np.zeros((3, cols)),
            )
        )
    return out


def _factors(row_acc: np.ndarray, col_acc: np.ndarray, eps: float):
    mu = row_acc.mean()
    if not mu > 0.0:
        mu = 1.0
    rf = 1.0 / np.sqrt(row_acc / mu + eps)
    cf = 1.0 / np.sqrt(col_acc / mu + eps)
    return rf, cf


def update_state(
    state: list[TensorFeatureState], grads: list[np.ndarray], cfg: FeatureConfig
) -> list[TensorFeatureState]:
    """Advance all accumulators by one gradient observation (in place)."""
    mbetas = cfg.momentum_betas
    ab = cfg.adafactor_betas
    b4 = cfg.second_moment_beta
    for ts, g in zip(state, grads):
        g2d = _as2d(np.asarray(g, dtype=np.float64))
        scratch = np.empty_like(g2d)
        for i, b in enumerate(mbetas):
            ts.m[i] *= b
            np.multiply(g2d, 1.0 - b, out=scratch)
            ts.m[i] += scratch
        np.multiply(g2d, g2d, out=scratch)
        ts.v *= b4
        scratch *= 1.0 - b4
        ts.v += scratch
        rf, cf = _factors(ts.v.mean(axis=1), ts.v.mean(axis=0), cfg.eps)
        np.multiply(g2d, rf[:, None], out=scratch)
        scratch *= cf[None, :]
        scratch *= scratch  # delta^2
        row_sq = scratch.mean(axis=1)
        col_sq = scratch.mean(axis=0)
        for i, b in enumerate(ab):
            ts.r[i] *= b
            ts.r[i] += (1.0 - b) * row_sq
            ts.c[i] *= b
            ts.c[i] += (1.0 - b) * col_sq
    return state


def feature_block_t(
    ts: TensorFeatureState,
    w: np.ndarray,
    g: np.ndarray,
    cfg: FeatureConfig,
    normalize: bool | None = None,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """(27, numel) feature matrix for one tensor, parameters in row-major order.

    Transposed layout so every column fill is a contiguous write; this is the
    hot path the inner loop uses. :func:`feature_block` exposes the
    (numel, 27) orientation. ``normalize=False`` skips the RMS division even
    when the config asks for it (callers may fold the division elsewhere);
    ``out`` lets callers reuse a (27, numel) buffer across steps.
    """
    if normalize is None:
        normalize = cfg.normalize
    w2 = _as2d(np.asarray(w, dtype=np.float64))
    g2 = _as2d(np.asarray(g, dtype=np.float64))
    rows, cols = w2.shape
    n = rows * cols
    eps = cfg.eps
    F = out if out is not None else np.empty((NUM_FEATURES, n))
    if F.shape != (NUM_FEATURES, n):
        raise ValueError(f"out buffer has shape {F.shape}, need {(NUM_FEATURES, n)}")

    def plane(idx: int) -> np.ndarray:
        return F[idx].reshape(rows, cols)

    plane(0)[:] = w2
    for i in range(3):
        plane(1 + i)[:] = ts.m[i]
    plane(4)[:] = ts.v
    rsv = 1.0 / np.sqrt(ts.v + eps)
    for i in range(3):
        np.multiply(ts.m[i], rsv, out=plane(5 + i))
    plane(8)[:] = rsv
    for i in range(3):
        rf, cf = _factors(ts.r[i], ts.c[i], eps)
        fac = rf[:, None] * cf[None, :]
        np.multiply(g2, fac, out=plane(9 + i))
        plane(12 + i)[:] = ts.r[i][:, None]
        plane(15 + i)[:] = ts.c[i][None, :]
        plane(18 + i)[:] = (1.0 / np.sqrt(ts.r[i] + eps))[:, None]
        plane(21 + i)[:] = (1.0 / np.sqrt(ts.c[i] + eps))[None, :]
        np.multiply(ts.m[i], fac, out=plane(24 + i))
    if normalize:
        F /= feature_scale_t(F, eps)[:, None]
    return F


def feature_scale_t(F: np.ndarray, eps: float) -> np.ndarray:
    """Per-feature RMS of a (27, numel) block, clamped below by eps."""
    rms = np.sqrt(np.einsum("ij,ij->i", F, F) / F.shape[1])
    return np.maximum(rms, eps)


def feature_block(
    ts: TensorFeatureState, w: np.ndarray, g: np.ndarray, cfg: FeatureConfig
) -> np.ndarray:
    """(numel, 27) feature matrix for one tensor, rows in row-major order."""
    return feature_block_t(ts, w, g, cfg).T


def feature_matrix(
    state: list[TensorFeatureState],
    params: OptimizeeParams,
    grads: list[np.ndarray],
    cfg: FeatureConfig,
) -> np.ndarray:
    """(num_params, 27) matrix, tensors stacked in canonical order."""
    blocks = [
        feature_block(ts, w, g, cfg)
        for ts, w, g in zip(state, params.arrays(), grads)
    ]
    return np.concatenate(blocks, axis=0)
