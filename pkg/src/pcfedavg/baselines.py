"""Single-model penalized baselines: FedAvg, FedProx and SCAFFOLD.

All three minimize ``(1/m) sum_i [f_i(W) + rho/2 dist(W, X_i)^2]`` over one
shared model ``W`` that the server broadcasts to every agent each round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import constraints as cs
from .federation import DivergenceError, KStarHistory, RunResult, Schedule, ServerState
from .metrics import ReferenceSolution, RoundRecord, evaluate_round
from .numerics import CLIENT_SAMPLING, DTYPE, MINIBATCH, RngStream, sample_indices, stream
from .problem import Problem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedAvg:
    pass


@dataclass(frozen=True)
class FedProx:
    mu: float = 0.0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("FedProx mu must be non-negative")


@dataclass(frozen=True)
class Scaffold:
    global_step: float = 1.0
    sampled_agents: int | None = None  # None means full participation


Method = FedAvg | FedProx | Scaffold


@dataclass(frozen=True)
class BaselineConfig:
    method: Method
    gamma: float
    rho: Schedule
    H: int
    R: int
    m: int
    seed: int = 0
    batch_fraction: float = 1.0

    def __post_init__(self):
        if self.H < 1 or self.R < 1 or self.m < 1:
            raise ValueError("H, R and m must be positive")
        if isinstance(self.method, Scaffold):
            s = self.method.sampled_agents
            if s is not None and not 1 <= s <= self.m:
                raise ValueError(f"SCAFFOLD samples {s} agents but only {self.m} exist")

    @property
    def K(self) -> int:
        return self.R * self.H


@dataclass(eq=False)
class ScaffoldControl:
    server_control: np.ndarray
    agent_controls: np.ndarray  # (m, n)

    @classmethod
    def zeros(cls, m: int, n: int) -> "ScaffoldControl":
        return cls(np.zeros(n, dtype=DTYPE), np.zeros((m, n), dtype=DTYPE))


def penalized_local_grad(oracle, S_i, rho: float, W: np.ndarray, rng: RngStream, batch_fraction: float = 1.0):
    """Stochastic gradient of ``f_i(W) + rho/2 dist(W, S_i)^2``."""
    return oracle.stochastic_grad(W, rng, batch_fraction) + rho * cs.penalty_grad(S_i, W)


def _local_descent(problem, i, W0, cfg, rho, rng, k0, correction=None, mu=0.0, trace=None):
    W = W0.copy()
    gamma = cfg.gamma
    for t in range(cfg.H):
        if trace is not None:
            trace.append(W)
        try:
            g = penalized_local_grad(problem.oracles[i], problem.sets[i], rho, W, rng, cfg.batch_fraction)
        except FloatingPointError as exc:
            raise DivergenceError(f"agent {i} diverged at step {k0 + t}: {exc}") from None
        if mu:
            g = g + mu * (W - W0)
        if correction is not None:
            g = g + correction
        W = W - gamma * g
        if not np.all(np.isfinite(W)):
            raise DivergenceError(f"agent {i} produced a non-finite model at step {k0 + t}")
    return W


def _mean(rows):
    acc = np.array(rows[0], dtype=DTYPE)
    for x in rows[1:]:
        acc += x
    return acc / len(rows)


def _record(problem, W, models, ref, r, cfg, rho):
    return evaluate_round(problem, W, ref, [problem.replicate(x) for x in models] if models else None,
                          round=r, k=(r + 1) * cfg.H, gamma=cfg.gamma, rho=rho)


def run_fedavg_round(W, r, cfg, problem, rngs, ref=None, mu: float = 0.0, traces=None):
    """Every agent descends ``H`` steps from the broadcast ``W``; the server averages.

    ``mu > 0`` adds the FedProx proximal pull ``mu (W_local - W)``.
    """
    rho = cfg.rho(r, cfg.R)
    models = []
    for i in range(cfg.m):
        trace = None if traces is None else traces.setdefault(i, [])
        models.append(_local_descent(problem, i, W, cfg, rho, rngs[i], r * cfg.H, mu=mu, trace=trace))
    W_new = _mean(models)
    return W_new, _record(problem, W_new, models, ref, r, cfg, rho)


def run_fedprox_round(W, r, cfg, problem, rngs, ref=None, traces=None):
    return run_fedavg_round(W, r, cfg, problem, rngs, ref, mu=cfg.method.mu, traces=traces)


def run_fedscaffold_round(W, r, cfg, problem, rngs, control: ScaffoldControl, sampler: RngStream, ref=None,
                          traces=None):
    """One SCAFFOLD round with gradient-difference control updates.

    Sampled agents run corrected steps ``g - c_i + c``, refresh their control
    as ``c_i - c + (W - y_i)/(H gamma)``, and the server moves ``W`` by
    ``global_step`` times the mean model delta and ``c`` by ``s/m`` times the
    mean control delta.
    """
    method = cfg.method
    rho = cfg.rho(r, cfg.R)
    s = cfg.m if method.sampled_agents is None else method.sampled_agents
    chosen = np.arange(cfg.m) if s == cfg.m else np.sort(sample_indices(sampler, cfg.m, s))
    c = control.server_control
    dys, dcs, models = [], [], []
    for i in chosen:
        ci = control.agent_controls[i]
        trace = None if traces is None else traces.setdefault(int(i), [])
        y = _local_descent(problem, i, W, cfg, rho, rngs[i], r * cfg.H, correction=c - ci, trace=trace)
        ci_new = ci - c + (W - y) / (cfg.H * cfg.gamma)
        dys.append(y - W)
        dcs.append(ci_new - ci)
        models.append(y)
        control.agent_controls[i] = ci_new
    W_new = W + method.global_step * _mean(dys)
    control.server_control = c + (s / cfg.m) * _mean(dcs)
    return W_new, _record(problem, W_new, models, ref, r, cfg, rho)


def run_baseline(
    problem: Problem,
    cfg: BaselineConfig,
    ref: ReferenceSolution | None = None,
    w0: np.ndarray | None = None,
    keep_history: bool | None = None,
    on_round=None,
) -> RunResult:
    """Run a penalized baseline for ``cfg.R`` rounds from ``w0`` (zeros by default).

    The K* history holds the virtual mean of the agents' local models at each
    local step; agents not sampled in a round sit at the broadcast model.
    """
    if cfg.m != problem.m:
        raise ValueError("baseline config and problem disagree on the number of agents")
    W = np.zeros(problem.n, dtype=DTYPE) if w0 is None else np.array(w0, dtype=DTYPE)
    rngs = [stream(cfg.seed, MINIBATCH, i) for i in range(cfg.m)]
    sampler = stream(cfg.seed, CLIENT_SAMPLING)
    control = ScaffoldControl.zeros(cfg.m, problem.n) if isinstance(cfg.method, Scaffold) else None
    history = KStarHistory(cfg.K, 1, problem.n, cfg.seed, keep_history)
    records: list[RoundRecord] = []
    for r in range(cfg.R):
        k0 = r * cfg.H
        want = [t for t in range(cfg.H) if history.wants(k0 + t)]
        traces = {} if want else None
        W_start = W
        if isinstance(cfg.method, Scaffold):
            W, rec = run_fedscaffold_round(W, r, cfg, problem, rngs, control, sampler, ref, traces)
        elif isinstance(cfg.method, FedProx):
            W, rec = run_fedprox_round(W, r, cfg, problem, rngs, ref, traces)
        else:
            W, rec = run_fedavg_round(W, r, cfg, problem, rngs, ref, traces=traces)
        for t in want:
            history.record(k0 + t, _mean([traces[i][t] if i in traces else W_start for i in range(cfg.m)])[None, :])
        rec.kstar_flag = k0 <= history.kstar < k0 + cfg.H
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    result = RunResult(records, ServerState(problem.replicate(W), cfg.R), [], history)
    result.extra["model"] = W
    if control is not None:
        result.extra["control"] = control
    return result
