"""Dense float64 arrays and splittable, deterministic random streams.

Weight matrices, gradients and feature buffers throughout the package are
plain numpy arrays: 2-D row-major float64 for matrices, 1-D float64 for
vectors (dataset features may be stored as float32; all training math is
done in float64). This module pins those conventions down and provides the
RNG discipline everything else builds on: counter-based streams addressed
by (seed, stream_id) that can be split into independent children without
consuming any state from the parent.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngStream", "gaussian", "matmul"]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # SplitMix64 finalizer: bijective on 64-bit ints, so distinct inputs
    # always map to distinct stream ids.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class RngStream:
    """Deterministic random stream addressed by (seed, stream_id).

    Identical (seed, stream_id) pairs yield bit-identical draw sequences on
    the same platform. ``child(label)`` derives an independent stream and
    leaves the parent untouched, so workers can be seeded structurally
    (per particle pair, per episode, per truncation) and evaluated in any
    order. Streams are value-like: split them, never share one mutably.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        hi = _splitmix64(self.seed)
        lo = _splitmix64(hi ^ _splitmix64(self.stream_id))
        self._gen = np.random.Generator(np.random.Philox(key=(hi << 64) | lo))

    def child(self, label: int) -> "RngStream":
        """Derive the child stream for ``label``; the parent is unchanged."""
        return RngStream(
            self.seed, _splitmix64(self.stream_id ^ _splitmix64(int(label) & _MASK64))
        )

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size=size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return loc + scale * self._gen.standard_normal(size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high=high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __getstate__(self):
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "gen_state": self._gen.bit_generator.state,
        }

    def __setstate__(self, state):
        self.seed = state["seed"]
        self.stream_id = state["stream_id"]
        bg = np.random.Philox()
        bg.state = state["gen_state"]
        self._gen = np.random.Generator(bg)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian(shape, mean: float, std: float, rng: RngStream) -> np.ndarray:
    """I.i.d. N(mean, std^2) samples; std = 0 gives a constant array."""
    if std < 0:
        raise ValueError(f"gaussian std must be >= 0, got {std}")
    return np.asarray(mean + std * rng.standard_normal(size=shape), dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b
