"""Closed convex constraint sets with exact Euclidean projections.

Each agent owns one set. Besides the projection, the squared distance
``||x - P(x)||^2`` and its half-gradient ``x - P(x)`` drive the penalty terms
used by PC-FedAvg and the penalized baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE


def project_l1_ball(x: np.ndarray, tau: float) -> np.ndarray:
    """Euclidean projection onto ``{y : ||y||_1 <= tau}`` by sorting magnitudes.

    Returns ``sign(x) * max(|x| - theta, 0)`` where ``theta`` is the unique
    threshold making the result land on the boundary (``theta = 0`` inside).
    """
    x = np.asarray(x, dtype=DTYPE)
    a = np.abs(x)
    total = a.sum()
    if not np.isfinite(total):
        raise FloatingPointError("cannot project a vector with non-finite l1 norm")
    if total <= tau:
        return x.copy()
    # stable sort keeps equal magnitudes in coordinate order
    u = a[np.argsort(-a, kind="stable")]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    # j = 1 always qualifies; rounding can hide it when tau is below one ulp of u[0]
    hits = np.nonzero(u * j > css - tau)[0]
    support = hits[-1] if hits.size else 0
    k = support + 1
    # a - theta written as (a - mean of the support) + tau/k to limit cancellation
    p = np.sign(x) * np.maximum((a - css[support] / k) + tau / k, 0.0)
    # rounding can still leave the l1 norm a few ulps above tau
    s = np.abs(p).sum()
    return p * (tau / s) if s > tau else p


@dataclass(frozen=True)
class L1Ball:
    tau: float

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"L1Ball radius must be positive and finite, got {self.tau}")

    def project(self, x: np.ndarray) -> np.ndarray:
        return project_l1_ball(x, self.tau)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        return float(np.abs(x).sum()) <= self.tau * (1.0 + tol)

    @property
    def scale(self) -> float:
        return self.tau


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=DTYPE).reshape(-1)
        hi = np.asarray(self.hi, dtype=DTYPE).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("Box bounds must have equal length")
        if np.any(lo > hi):
            raise ValueError("Box requires lo <= hi coordinatewise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=DTYPE), self.lo, self.hi)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        slack = tol * (1.0 + self.scale)
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))

    @property
    def scale(self) -> float:
        finite = np.concatenate([self.lo, self.hi])
        finite = finite[np.isfinite(finite)]
        return float(np.abs(finite).max()) if finite.size else 0.0


@dataclass(frozen=True)
class Unconstrained:
    """The whole space; stands in for an infinite l1 radius."""

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=DTYPE)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        return True

    @property
    def scale(self) -> float:
        return 0.0


ConstraintSet = L1Ball | Box | Unconstrained


def project(S: ConstraintSet, x: np.ndarray) -> np.ndarray:
    return S.project(x)


def penalty_grad(S: ConstraintSet, x: np.ndarray) -> np.ndarray:
    """Gradient of ``h(x) = 0.5 * dist(x, S)^2``, i.e. ``x - P_S(x)``."""
    x = np.asarray(x, dtype=DTYPE)
    return x - S.project(x)


def distance_sq(S: ConstraintSet, x: np.ndarray) -> float:
    """Squared Euclidean distance to ``S`` (twice the penalty ``h``)."""
    r = penalty_grad(S, x)
    return float(r @ r)


def distance(S: ConstraintSet, x: np.ndarray) -> float:
    return math.sqrt(distance_sq(S, x))


def from_tau(tau: float) -> ConstraintSet:
    """``L1Ball(tau)``, or ``Unconstrained`` for an infinite radius."""
    return Unconstrained() if math.isinf(tau) else L1Ball(float(tau))
