"""Local objectives with full and stochastic gradient oracles.

Three kinds are provided: softmax cross-entropy regression over a labelled
dataset, a deterministic quadratic ``0.5 w'Qw - b'w``, and the same quadratic
with additive Gaussian gradient noise of total variance ``noise_std**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, RngStream, sample_indices


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,), ints in [0, classes)
    classes: int = 10

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=DTYPE)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise ValueError("features must be an (N, D) matrix")
        if X.shape[0] < 1 or X.shape[0] != y.size:
            raise ValueError(f"need N >= 1 rows with one label each, got {X.shape[0]} rows and {y.size} labels")
        if y.min() < 0 or y.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.classes)

    def with_bias(self) -> "Dataset":
        ones = np.ones((self.n_samples, 1), dtype=DTYPE)
        return Dataset(np.hstack([self.features, ones]), self.labels, self.classes)


@dataclass(frozen=True)
class PersonalizationWeights:
    sigma: tuple[float, ...]

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        if not sigma or any(not (s >= 0 and math.isfinite(s)) for s in sigma):
            raise ValueError(f"personalization weights must be finite and non-negative, got {sigma}")
        object.__setattr__(self, "sigma", sigma)

    def __len__(self) -> int:
        return len(self.sigma)

    def __getitem__(self, i: int) -> float:
        return self.sigma[i]

    @property
    def max(self) -> float:
        return max(self.sigma)


def power_iteration(matvec, n: int, tol: float = 1e-9, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric PSD operator given by ``matvec``."""
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        resid = np.linalg.norm(w - lam_new * v)
        v = w / norm
        if resid <= tol * max(lam_new, 1e-300) or abs(lam_new - lam) <= 1e-15 * lam_new:
            return lam_new
        lam = lam_new
    return lam


class SoftmaxObjective:
    """Mean softmax cross-entropy of a linear model ``W`` (D x Kc, flattened row-major)."""

    def __init__(self, data: Dataset):
        self.data = data
        self.classes = data.classes
        self.dim = data.n_features * data.classes
        self._L = None

    def _weights(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=DTYPE)
        if w.size != self.dim:
            raise ValueError(f"softmax model expects {self.dim} parameters, got {w.size}")
        return w.reshape(self.data.n_features, self.classes)

    @staticmethod
    def _loss_grad(X, y, W, want_grad=True):
        z = X @ W
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        s = ez.sum(axis=1, keepdims=True)
        rows = np.arange(X.shape[0])
        loss = float(np.mean(np.log(s[:, 0]) - z[rows, y]))
        if not want_grad:
            return loss, None
        p = ez / s
        p[rows, y] -= 1.0
        return loss, (X.T @ p / X.shape[0]).reshape(-1)

    def loss(self, w: np.ndarray) -> float:
        return self._loss_grad(self.data.features, self.data.labels, self._weights(w), want_grad=False)[0]

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self._loss_grad(self.data.features, self.data.labels, self._weights(w))[1]

    def stochastic_grad(self, w: np.ndarray, rng: RngStream, batch_fraction: float = 1.0) -> np.ndarray:
        if not 0.0 < batch_fraction <= 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")
        W = self._weights(w)
        N = self.data.n_samples
        batch = max(1, int(round(batch_fraction * N)))
        if batch == N:
            return self._loss_grad(self.data.features, self.data.labels, W)[1]
        idx = sample_indices(rng, N, batch)
        return self._loss_grad(self.data.features[idx], self.data.labels[idx], W)[1]

    def smoothness(self) -> float:
        """Certified bound ``0.5 * lambda_max(X'X) / N`` on the Hessian norm."""
        if self._L is None:
            X = self.data.features
            lam = power_iteration(lambda v: X.T @ (X @ v), X.shape[1], tol=1e-9)
            self._L = 0.5 * lam / X.shape[0]
        return self._L


class QuadraticObjective:
    """``0.5 w'Qw - b'w`` with symmetric PSD ``Q``; its gradient oracle is exact."""

    def __init__(self, Q, b):
        Q = np.array(Q, dtype=DTYPE)
        b = np.array(b, dtype=DTYPE).reshape(-1)
        if Q.ndim != 2 or Q.shape != (b.size, b.size):
            raise ValueError("Q must be n x n with n = len(b)")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("Q must be symmetric")
        self.Q = 0.5 * (Q + Q.T)
        self.b = b
        self.dim = b.size
        self._L = None

    def _check(self, w):
        w = np.asarray(w, dtype=DTYPE)
        if w.size != self.dim:
            raise ValueError(f"quadratic expects {self.dim} parameters, got {w.size}")
        return w

    def loss(self, w: np.ndarray) -> float:
        w = self._check(w)
        return float(0.5 * w @ (self.Q @ w) - self.b @ w)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.Q @ self._check(w) - self.b

    def stochastic_grad(self, w: np.ndarray, rng: RngStream | None = None, batch_fraction: float = 1.0) -> np.ndarray:
        return self.grad(w)

    def smoothness(self) -> float:
        if self._L is None:
            self._L = power_iteration(lambda v: self.Q @ v, self.dim, tol=1e-9)
        return self._L

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.Q, self.b)


class NoisyQuadraticObjective(QuadraticObjective):
    """Quadratic whose stochastic gradient adds N(0, noise_std^2/n) per coordinate."""

    def __init__(self, Q, b, noise_std: float = 0.0):
        super().__init__(Q, b)
        if not (noise_std >= 0 and math.isfinite(noise_std)):
            raise ValueError("noise_std must be finite and non-negative")
        self.noise_std = float(noise_std)

    def stochastic_grad(self, w: np.ndarray, rng: RngStream | None = None, batch_fraction: float = 1.0) -> np.ndarray:
        g = self.grad(w)
        if self.noise_std == 0.0:
            return g
        if rng is None:
            raise ValueError("a random stream is required for a noisy oracle")
        return g + (self.noise_std / math.sqrt(self.dim)) * rng.normal(self.dim)


ObjectiveOracle = SoftmaxObjective | QuadraticObjective | NoisyQuadraticObjective


# Function-style aliases mirroring the oracle methods.
def loss(o, w):
    return o.loss(w)


def grad_full(o, w):
    return o.grad(w)


def grad_stochastic(o, w, stream, batch_fraction=1.0):
    return o.stochastic_grad(w, stream, batch_fraction)


def smoothness_constant(o) -> float:
    return o.smoothness()
