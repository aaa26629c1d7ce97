"""Dense vector helpers and reproducible per-agent random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Random streams are
backed by the counter-based Philox generator keyed on ``(seed, stream_id)``,
so every (seed, stream) pair yields the same sequence on every platform and
distinct stream ids never share state.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

# Stream-id namespaces. Agent-indexed roles add the agent index to the base.
MINIBATCH = 0
NOISE = 1 << 32
CLIENT_SAMPLING = 2 << 32
KSTAR = 3 << 32
PARTITION = 4 << 32
SYNTHETIC = 5 << 32
MONTE_CARLO = 6 << 32

_U64 = (1 << 64) - 1


def as_param(x, n: int | None = None) -> np.ndarray:
    """Copy ``x`` into a finite float64 vector, optionally checking its length."""
    v = np.array(x, dtype=DTYPE).reshape(-1)
    if n is not None and v.size != n:
        raise ValueError(f"expected a vector of length {n}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("parameter vector contains non-finite entries")
    return v


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a*x + y`` as a new vector; inputs are left untouched."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not np.isfinite(a):
        raise ValueError("scale must be finite")
    out = a * x + y
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("axpy produced non-finite entries")
    return out


class RngStream:
    """A single-owner random stream identified by ``(seed, stream_id)``.

    The 128-bit Philox key is ``seed | stream_id << 64``, so streams are
    independent by construction rather than by spacing.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _U64 and 0 <= stream_id <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size: int) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integer(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        return int(self._gen.integers(0, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def stream(seed: int, role: int, index: int = 0) -> RngStream:
    """Stream for ``role`` (one of the namespace constants) and agent ``index``."""
    return RngStream(seed, role + index)


def sample_indices(rng: RngStream, population: int, batch: int) -> np.ndarray:
    """Draw ``batch`` distinct indices uniformly from ``range(population)``."""
    if not 1 <= batch <= population:
        raise ValueError(f"need 1 <= batch <= population, got batch={batch}, population={population}")
    return rng.generator.choice(population, size=batch, replace=False)
