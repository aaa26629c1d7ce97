"""The personalized constrained problem: objectives, sets and coupling weights.

A stacked point is an ``(m, n)`` array whose row ``i`` is agent ``i``'s
variable. The global objective is

    f(X) = (1/m) * sum_i [ f_i(mean(X)) + sigma_i/2 * ||X_i - mean(X)||^2 ]

subject to ``X_i`` lying in agent ``i``'s set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constraints as cs
from .numerics import DTYPE
from .objectives import PersonalizationWeights


def agent_mean(X: np.ndarray) -> np.ndarray:
    """Row mean accumulated left to right over agents."""
    acc = np.array(X[0], dtype=DTYPE)
    for row in X[1:]:
        acc += row
    return acc / X.shape[0]


@dataclass(eq=False)
class Problem:
    oracles: list
    sets: list
    sigma: PersonalizationWeights

    def __post_init__(self):
        if not isinstance(self.sigma, PersonalizationWeights):
            self.sigma = PersonalizationWeights(tuple(self.sigma))
        m = len(self.oracles)
        if m < 1 or len(self.sets) != m or len(self.sigma) != m:
            raise ValueError(
                f"need one oracle, set and sigma per agent; got {m}, {len(self.sets)}, {len(self.sigma)}"
            )
        dims = {o.dim for o in self.oracles}
        if len(dims) != 1:
            raise ValueError(f"all local objectives must share one dimension, got {sorted(dims)}")

    @property
    def m(self) -> int:
        return len(self.oracles)

    @property
    def n(self) -> int:
        return self.oracles[0].dim

    @property
    def L_f(self) -> float:
        return max(o.smoothness() for o in self.oracles)

    @property
    def L(self) -> float:
        """Aggregate smoothness ``L_f + sigma_max * m``."""
        return self.L_f + self.sigma.max * self.m

    def L_G(self, rho: float) -> float:
        """Smoothness of each penalized per-agent objective."""
        return (self.L_f + self.sigma.max * (self.m - 1)) / self.m + rho

    def zeros(self) -> np.ndarray:
        return np.zeros((self.m, self.n), dtype=DTYPE)

    def objective(self, X: np.ndarray) -> float:
        xbar = agent_mean(X)
        total = 0.0
        for i, o in enumerate(self.oracles):
            d = X[i] - xbar
            total += o.loss(xbar) + 0.5 * self.sigma[i] * float(d @ d)
        return total / self.m

    def objective_grad(self, X: np.ndarray) -> np.ndarray:
        m = self.m
        xbar = agent_mean(X)
        gbar = np.zeros(self.n, dtype=DTYPE)
        reg = np.zeros(self.n, dtype=DTYPE)
        for i, o in enumerate(self.oracles):
            gbar += o.grad(xbar)
            reg += self.sigma[i] * (X[i] - xbar)
        gbar /= m
        reg /= m
        G = np.empty_like(X, dtype=DTYPE)
        for j in range(m):
            G[j] = (gbar + self.sigma[j] * (X[j] - xbar) - reg) / m
        return G

    def penalty(self, X: np.ndarray) -> float:
        """``(1/m) sum_i h_i(X_i)`` with ``h_i`` half the squared distance."""
        return sum(0.5 * cs.distance_sq(S, X[i]) for i, S in enumerate(self.sets)) / self.m

    def penalized_objective(self, X: np.ndarray, rho: float) -> float:
        return self.objective(X) + rho * self.penalty(X)

    def penalized_grad(self, X: np.ndarray, rho: float) -> np.ndarray:
        G = self.objective_grad(X)
        for i, S in enumerate(self.sets):
            G[i] += (rho / self.m) * cs.penalty_grad(S, X[i])
        return G

    def project(self, X: np.ndarray) -> np.ndarray:
        return np.stack([S.project(X[i]) for i, S in enumerate(self.sets)])

    def replicate(self, w: np.ndarray) -> np.ndarray:
        """Stack a single shared model once per agent."""
        return np.tile(np.asarray(w, dtype=DTYPE), (self.m, 1))
