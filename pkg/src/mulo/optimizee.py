"""The inner model: an L-layer MLP classifier with manual forward/backward.

Construction is parametrization-aware (init std and forward multipliers come
from :mod:`mulo.parametrization`), the forward pass records every
post-multiplier pre-activation so coordinate checks can replay them, and the
backward pass computes exact gradients of the mean softmax cross-entropy.
Also owns the dataset container, its binary file format, batch sampling and
a synthetic Gaussian-mixture task generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .parametrization import (
    LayerGeometry,
    LayerRole,
    MultiplierSet,
    ParamMode,
    forward_multiplier,
    init_std,
)
from .tensor import RngStream, gaussian

__all__ = [
    "MLPSpec",
    "LayerParams",
    "TensorMeta",
    "OptimizeeParams",
    "ForwardRecord",
    "Dataset",
    "DatasetFormatError",
    "init_mlp",
    "forward",
    "backward",
    "save_dataset",
    "load_dataset",
    "sample_batch",
    "make_gaussian_mixture",
]

DATASET_MAGIC = b"MLOD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Architecture + parametrization of the inner MLP.

    ``depth`` counts weight layers: layer 0 maps input_dim -> width (Input
    role), layer depth-1 maps width -> num_classes (Output role), everything
    between is width -> width (Hidden role). Biases inherit their layer's
    role.
    """

    input_dim: int
    hidden_width: int
    depth: int
    num_classes: int
    mode: ParamMode = ParamMode.MUP
    multipliers: MultiplierSet = field(default_factory=MultiplierSet)
    activation: str = "relu"
    zero_init_output: bool = True
    init_variance_mode: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if min(self.input_dim, self.hidden_width, self.num_classes) < 1:
            raise ValueError(f"invalid spec dims: {self}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_geometries(self) -> list[LayerGeometry]:
        dims = [self.input_dim] + [self.hidden_width] * (self.depth - 1) + [self.num_classes]
        return [LayerGeometry(dims[i], dims[i + 1]) for i in range(self.depth)]

    def role_of(self, layer: int) -> LayerRole:
        if layer == 0:
            return LayerRole.INPUT
        if layer == self.depth - 1:
            return LayerRole.OUTPUT
        return LayerRole.HIDDEN


@dataclass
class LayerParams:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    role: LayerRole
    geom: LayerGeometry
    mult: float  # cached forward multiplier


@dataclass(frozen=True)
class TensorMeta:
    name: str
    role: LayerRole
    geom: LayerGeometry
    is_bias: bool


@dataclass
class OptimizeeParams:
    """All inner-model weights, in the canonical tensor order W0, b0, W1, ..."""

    spec: MLPSpec
    layers: list[LayerParams]

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for lp in self.layers:
            out.append(lp.weight)
            out.append(lp.bias)
        return out

    def set_arrays(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for lp in self.layers:
            lp.weight = next(it)
            lp.bias = next(it)

    def metas(self) -> list[TensorMeta]:
        out: list[TensorMeta] = []
        for i, lp in enumerate(self.layers):
            out.append(TensorMeta(f"layer{i}.weight", lp.role, lp.geom, False))
            out.append(TensorMeta(f"layer{i}.bias", lp.role, lp.geom, True))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def clone(self) -> "OptimizeeParams":
        return OptimizeeParams(
            self.spec,
            [replace(lp, weight=lp.weight.copy(), bias=lp.bias.copy()) for lp in self.layers],
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class ForwardRecord:
    """One batch's forward trace.

    ``preacts[l]`` is the post-multiplier pre-activation of layer l (the
    quantity entering the nonlinearity; the last entry is the logits).
    ``inputs[l]`` is the activation fed into layer l (``inputs[0]`` is the
    batch itself).
    """

    preacts: list[np.ndarray]
    inputs: list[np.ndarray]
    probs: np.ndarray | None
    loss: float
    diverged: bool

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


def init_mlp(spec: MLPSpec, rng: RngStream) -> OptimizeeParams:
    """Parametrization-aware init: weights N(0, init_std^2), biases zero.

    The output layer is zero-initialized by default (the wide-limit-friendly
    choice); set ``spec.zero_init_output=False`` to sample it instead.
    """
    layers = []
    for i, geom in enumerate(spec.layer_geometries()):
        role = spec.role_of(i)
        std = init_std(role, geom, spec.mode, spec.init_variance_mode)
        if role is LayerRole.OUTPUT and spec.zero_init_output:
            w = np.zeros((geom.fan_in, geom.fan_out))
        else:
            w = gaussian((geom.fan_in, geom.fan_out), 0.0, std, rng.child(i))
        b = np.zeros(geom.fan_out)
        mult = forward_multiplier(role, geom, spec.mode, spec.multipliers)
        layers.append(LayerParams(w, b, role, geom, mult))
    return OptimizeeParams(spec, layers)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def forward(params: OptimizeeParams, X: np.ndarray, y: np.ndarray) -> ForwardRecord:
    """Forward pass with mean softmax cross-entropy loss.

    A non-finite loss or pre-activation marks the record as diverged; it is
    recorded, not raised, so harnesses can cap and continue.
    """
    spec = params.spec
    h = np.asarray(X, dtype=np.float64)
    preacts: list[np.ndarray] = []
    inputs: list[np.ndarray] = [h]
    with np.errstate(over="ignore", invalid="ignore"):
        for i, lp in enumerate(params.layers):
            z = lp.mult * (h @ lp.weight + lp.bias)
            preacts.append(z)
            if i < spec.depth - 1:
                h = _act(z, spec.activation)
                inputs.append(h)
        logits = preacts[-1]
        if not np.isfinite(logits).all():
            return ForwardRecord(preacts, inputs, None, float("nan"), True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        denom = expz.sum(axis=1, keepdims=True)
        probs = expz / denom
        logp = shifted - np.log(denom)
        loss = float(-logp[np.arange(len(y)), y].mean())
    diverged = not np.isfinite(loss)
    return ForwardRecord(preacts, inputs, probs, loss, diverged)


def backward(
    params: OptimizeeParams, record: ForwardRecord, X: np.ndarray, y: np.ndarray
) -> list[np.ndarray]:
    """Exact gradients of the recorded mean loss, in canonical tensor order."""
    if record.diverged or record.probs is None:
        raise ValueError("cannot backprop a diverged forward record")
    spec = params.spec
    n = len(y)
    delta = record.probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n  # dL/dlogits
    grads: list[np.ndarray] = [None] * (2 * spec.depth)  # type: ignore[list-item]
    for l in range(spec.depth - 1, -1, -1):
        lp = params.layers[l]
        h_in = record.inputs[l]
        grads[2 * l] = lp.mult * (h_in.T @ delta)
        grads[2 * l + 1] = lp.mult * delta.sum(axis=0)
        if l > 0:
            dh = lp.mult * (delta @ lp.weight.T)
            z_prev = record.preacts[l - 1]
            delta = dh * _act_grad(z_prev, h_in, spec.activation)
    return grads


# ---------------------------------------------------------------------------
# datasets


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; the message carries a byte offset."""


@dataclass
class Dataset:
    features: np.ndarray  # (n, input_dim) float32
    labels: np.ndarray  # (n,) int64, values in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features/labels shape mismatch")
        if len(self.features) < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(
                f"labels out of range [0, {self.num_classes}): "
                f"min={self.labels.min()}, max={self.labels.max()}"
            )

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def save_dataset(ds: Dataset, path) -> None:
    header = DATASET_MAGIC + struct.pack(
        "<IQII", DATASET_VERSION, ds.n, ds.input_dim, ds.num_classes
    )
    feats = np.ascontiguousarray(ds.features, dtype="<f4")
    labels = np.ascontiguousarray(ds.labels, dtype="<u4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(feats.tobytes())
        f.write(labels.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    header_len = 4 + struct.calcsize("<IQII")
    if len(raw) < header_len:
        raise DatasetFormatError(
            f"truncated header: file has {len(raw)} bytes, need {header_len} (offset {len(raw)})"
        )
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r} at offset 0")
    version, n, input_dim, num_classes = struct.unpack("<IQII", raw[4:header_len])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    feat_bytes = n * input_dim * 4
    label_bytes = n * 4
    expected = header_len + feat_bytes + label_bytes
    if len(raw) != expected:
        raise DatasetFormatError(
            f"truncated body: expected {expected} bytes, got {len(raw)} "
            f"(offset {min(len(raw), expected)})"
        )
    feats = np.frombuffer(raw, dtype="<f4", count=n * input_dim, offset=header_len)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=header_len + feat_bytes)
    feats = feats.reshape(n, input_dim).copy()
    labels64 = labels.astype(np.int64)
    if labels64.max(initial=0) >= num_classes:
        bad = int(np.argmax(labels64 >= num_classes))
        raise ValueError(f"label {labels64[bad]} out of range at sample {bad}")
    return Dataset(feats, labels64, num_classes)


def sample_batch(
    ds: Dataset, batch_size: int, rng: RngStream, replace: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a batch; with ``replace=False`` indices come from a permutation."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if replace:
        idx = rng.integers(0, ds.n, size=batch_size)
    else:
        if batch_size > ds.n:
            raise ValueError(f"batch_size {batch_size} > dataset size {ds.n}")
        idx = rng.permutation(ds.n)[:batch_size]
    X = ds.features[idx].astype(np.float64)
    y = ds.labels[idx]
    return X, y


def make_gaussian_mixture(
    n: int,
    input_dim: int,
    num_classes: int,
    rng: RngStream,
    noise: float = 1.0,
) -> Dataset:
    """Synthetic classification task: unit-sphere class centers plus noise.

    Labels are drawn uniformly; per-coordinate noise is scaled by
    1/sqrt(input_dim) so the noise vector norm is ~``noise`` regardless of
    dimension.
    """
    centers = rng.normal(size=(num_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.asarray(rng.integers(0, num_classes, size=n), dtype=np.int64)
    feats = centers[labels] + noise * rng.normal(size=(n, input_dim)) / np.sqrt(input_dim)
    return Dataset(feats.astype(np.float32), labels, num_classes)
