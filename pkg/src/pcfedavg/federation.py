"""PC-FedAvg: multi-block local updates with block-wise server averaging.

Every agent keeps one block per agent. Within a round each agent runs ``H``
local steps on all of its blocks, penalizing infeasibility only in its own
block; the server then averages block ``j`` over agents for every ``j``. At
the start of the next round each agent's blocks are reset to those means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import constraints as cs
from .metrics import RoundRecord, ReferenceSolution, evaluate_round, sample_kstar
from .numerics import DTYPE, KSTAR, MINIBATCH, RngStream, stream
from .problem import Problem, agent_mean

log = logging.getLogger(__name__)

# Store every mean iterate while the history stays under this many floats.
HISTORY_LIMIT = 10_000_000

CROSS_BLOCK_RULES = ("algorithm", "gradient")


class DivergenceError(FloatingPointError):
    pass


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, r: int, R: int) -> float:
        return self.value


@dataclass(frozen=True)
class SqrtR:
    """``sqrt(R)``, fixed for the whole run."""

    scale: float = 1.0

    def __call__(self, r: int, R: int) -> float:
        return self.scale * math.sqrt(R)


@dataclass(frozen=True)
class InvSqrtR:
    """``scale / sqrt(R)``, fixed for the whole run."""

    scale: float = 1.0

    def __call__(self, r: int, R: int) -> float:
        return self.scale / math.sqrt(R)


@dataclass(frozen=True)
class QuarticRoot:
    """``(r + offset) ** 0.25``, growing with the round index."""

    offset: float = 10_000.0

    def __call__(self, r: int, R: int) -> float:
        return (r + self.offset) ** 0.25


Schedule = Constant | SqrtR | InvSqrtR | QuarticRoot


def parse_schedule(text) -> Schedule:
    """Parse ``0.03``, ``constant:0.03``, ``sqrt_r``, ``inv_sqrt_r:0.3`` or ``quartic:10000``."""
    if isinstance(text, (int, float)):
        return Constant(float(text))
    kind, _, arg = str(text).strip().partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "constant":
            return Constant(float(arg))
        if kind == "sqrt_r":
            return SqrtR(float(arg) if arg else 1.0)
        if kind == "inv_sqrt_r":
            return InvSqrtR(float(arg) if arg else 1.0)
        if kind == "quartic":
            return QuarticRoot(float(arg) if arg else 10_000.0)
        return Constant(float(kind))
    except ValueError:
        raise ValueError(f"cannot parse schedule {text!r}") from None


def format_schedule(s: Schedule) -> str:
    if isinstance(s, Constant):
        return f"constant:{s.value!r}"
    if isinstance(s, SqrtR):
        return f"sqrt_r:{s.scale!r}"
    if isinstance(s, InvSqrtR):
        return f"inv_sqrt_r:{s.scale!r}"
    return f"quartic:{s.offset!r}"


def step_size_ok(gamma: float, L_G: float, H: int) -> bool:
    """Whether ``gamma <= min(1/(6 L_G), 1/(5 L_G (H-1)))`` holds."""
    bound = 1.0 / (6.0 * L_G)
    if H > 1:
        bound = min(bound, 1.0 / (5.0 * L_G * (H - 1)))
    return gamma <= bound


# -- state -------------------------------------------------------------------


@dataclass(frozen=True)
class FederationConfig:
    m: int
    n: int
    H: int
    R: int
    gamma: Schedule
    rho: Schedule
    seed: int = 0
    batch_fraction: float = 1.0
    cross_block: str = "algorithm"

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.H < 1 or self.R < 1:
            raise ValueError("m, n, H and R must all be positive")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if self.cross_block not in CROSS_BLOCK_RULES:
            raise ValueError(f"cross_block must be one of {CROSS_BLOCK_RULES}")

    @property
    def K(self) -> int:
        return self.R * self.H


def schedule_values(cfg: FederationConfig, r: int, L_Grho_hint: float | None = None) -> tuple[float, float]:
    """Step size and penalty for round ``r``; warns if the step exceeds the theory bound."""
    if not 0 <= r < cfg.R:
        raise ValueError(f"round {r} outside [0, {cfg.R})")
    gamma, rho = cfg.gamma(r, cfg.R), cfg.rho(r, cfg.R)
    if L_Grho_hint is not None and not step_size_ok(gamma, L_Grho_hint, cfg.H):
        log.warning("round %d: step %.4g exceeds the bound implied by L_G=%.4g, H=%d", r, gamma, L_Grho_hint, cfg.H)
    return gamma, rho


@dataclass(eq=False)
class MultiBlockState:
    blocks: np.ndarray  # (m, n), row j is this agent's estimate of agent j's variable
    owner: int

    def copy(self) -> "MultiBlockState":
        return MultiBlockState(self.blocks.copy(), self.owner)

    @property
    def mean(self) -> np.ndarray:
        return agent_mean(self.blocks)


@dataclass(eq=False)
class ServerState:
    block_means: np.ndarray  # (m, n)
    round: int = 0


# -- local update ------------------------------------------------------------


def _direction(blocks, owner, xbar, g, S, sigma_i, rho, cross_block):
    m = blocks.shape[0]
    dev = blocks - xbar
    if cross_block == "algorithm":
        d = g / m - (sigma_i / m) * dev
    else:
        d = np.tile(g / m - (sigma_i / m) * dev[owner], (m, 1))
    d[owner] = g / m + rho * cs.penalty_grad(S, blocks[owner]) + sigma_i * ((m - 1) / m) * dev[owner]
    return d


def local_step(
    state: MultiBlockState,
    oracle,
    S_i,
    sigma_i: float,
    gamma: float,
    rho: float,
    rng: RngStream,
    batch_fraction: float = 1.0,
    cross_block: str = "algorithm",
    step: int | None = None,
) -> MultiBlockState:
    """One local iteration of agent ``state.owner`` on all of its blocks.

    A single stochastic gradient at the block average is shared by every
    block. With ``cross_block="algorithm"`` the blocks ``j != i`` use their own
    deviation from the average, as in the published update; ``"gradient"``
    uses the owner's deviation, which is the exact gradient of the per-agent
    penalized objective. The two agree whenever all blocks are equal.
    """
    X = state.blocks
    xbar = agent_mean(X)
    g = oracle.stochastic_grad(xbar, rng, batch_fraction)
    try:
        new = X - gamma * _direction(X, state.owner, xbar, g, S_i, sigma_i, rho, cross_block)
    except FloatingPointError as exc:
        raise DivergenceError(f"agent {state.owner} diverged at step {step}: {exc}") from None
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"agent {state.owner} produced non-finite blocks at step {step}")
    return MultiBlockState(new, state.owner)


def penalized_block_grad(state: MultiBlockState, oracle, S_i, sigma_i: float, rho: float) -> np.ndarray:
    """Exact gradient of agent i's penalized objective over its stacked blocks.

    Block ``j`` receives ``grad f_i(xbar)/m + sigma_i (delta_ij - 1/m)(x_i - xbar)``
    plus ``rho (x_i - P(x_i))`` on the owner's block.
    """
    X = state.blocks
    i = state.owner
    m = X.shape[0]
    xbar = agent_mean(X)
    dev = X[i] - xbar
    out = np.tile(oracle.grad(xbar) / m - (sigma_i / m) * dev, (m, 1))
    out[i] += sigma_i * dev + rho * cs.penalty_grad(S_i, X[i])
    return out


def penalized_block_objective(state: MultiBlockState, oracle, S_i, sigma_i: float, rho: float) -> float:
    """``f_i(xbar) + sigma_i/2 ||x_i - xbar||^2 + rho/2 dist(x_i, S_i)^2``."""
    X = state.blocks
    i = state.owner
    xbar = agent_mean(X)
    dev = X[i] - xbar
    return oracle.loss(xbar) + 0.5 * sigma_i * float(dev @ dev) + 0.5 * rho * cs.distance_sq(S_i, X[i])


# -- rounds ------------------------------------------------------------------


class KStarHistory:
    """Tracks the stacked mean iterate at local steps ``0..K-1``.

    ``kstar`` is drawn once up front from its own stream. When the full
    history fits under ``HISTORY_LIMIT`` floats, every iterate is kept so
    callers can average a metric over all K exactly.
    """

    def __init__(self, K: int, m: int, n: int, seed: int, keep_all: bool | None = None):
        self.K = K
        self.kstar = sample_kstar(K, stream(seed, KSTAR))
        if keep_all is None:
            keep_all = K * m * n <= HISTORY_LIMIT
        self.iterates = np.empty((K, m, n), dtype=DTYPE) if keep_all else None
        self.at_kstar: np.ndarray | None = None

    def wants(self, k: int) -> bool:
        return self.iterates is not None or k == self.kstar

    def record(self, k: int, Xbar: np.ndarray) -> None:
        if self.iterates is not None:
            self.iterates[k] = Xbar
        if k == self.kstar:
            self.at_kstar = Xbar.copy()


def broadcast(server: ServerState, m: int) -> list[MultiBlockState]:
    return [MultiBlockState(server.block_means.copy(), i) for i in range(m)]


def aggregate(agents: list[MultiBlockState]) -> np.ndarray:
    """Block-wise mean over agents, accumulated in agent order."""
    acc = agents[0].blocks.copy()
    for a in agents[1:]:
        acc += a.blocks
    return acc / len(agents)


def run_round(
    agents: list[MultiBlockState],
    server: ServerState,
    cfg: FederationConfig,
    problem: Problem,
    rngs: list[RngStream],
    ref: ReferenceSolution | None = None,
    history: KStarHistory | None = None,
) -> tuple[list[MultiBlockState], ServerState, RoundRecord]:
    """Broadcast, ``H`` local steps per agent, block-wise aggregation, measurement."""
    r = server.round
    gamma, rho = schedule_values(cfg, r)
    agents = broadcast(server, cfg.m)
    k0 = r * cfg.H
    want = [t for t in range(cfg.H) if history is not None and history.wants(k0 + t)]
    snaps = {t: [] for t in want}
    for i in range(cfg.m):
        a = agents[i]
        for t in range(cfg.H):
            if t in snaps:
                snaps[t].append(a.blocks)
            a = local_step(
                a, problem.oracles[i], problem.sets[i], problem.sigma[i], gamma, rho, rngs[i],
                cfg.batch_fraction, cfg.cross_block, step=k0 + t,
            )
        agents[i] = a
    for t in want:
        acc = snaps[t][0].copy()
        for B in snaps[t][1:]:
            acc += B
        history.record(k0 + t, acc / cfg.m)
    means = aggregate(agents)
    new_server = ServerState(means, r + 1)
    rec = evaluate_round(
        problem, means, ref, [a.blocks for a in agents],
        round=r, k=k0 + cfg.H, gamma=gamma, rho=rho,
        kstar_flag=history is not None and k0 <= history.kstar < k0 + cfg.H,
    )
    return agents, new_server, rec


@dataclass(eq=False)
class RunResult:
    records: list[RoundRecord]
    server: ServerState
    agents: list[MultiBlockState]
    history: KStarHistory | None
    step_size_warnings: int = 0
    extra: dict = field(default_factory=dict)


def run_pcfedavg(
    problem: Problem,
    cfg: FederationConfig,
    ref: ReferenceSolution | None = None,
    x0: np.ndarray | None = None,
    keep_history: bool | None = None,
    on_round=None,
) -> RunResult:
    """Run ``cfg.R`` rounds of PC-FedAvg from the stacked point ``x0`` (zeros by default)."""
    if (cfg.m, cfg.n) != (problem.m, problem.n):
        raise ValueError(f"config is for m={cfg.m}, n={cfg.n} but the problem has m={problem.m}, n={problem.n}")
    X0 = problem.zeros() if x0 is None else np.array(x0, dtype=DTYPE).reshape(cfg.m, cfg.n)
    server = ServerState(X0, 0)
    rngs = [stream(cfg.seed, MINIBATCH, i) for i in range(cfg.m)]
    history = KStarHistory(cfg.K, cfg.m, cfg.n, cfg.seed, keep_history)
    agents = broadcast(server, cfg.m)
    records = []
    warned = 0
    L_f = problem.L_f
    for r in range(cfg.R):
        gamma, rho = cfg.gamma(r, cfg.R), cfg.rho(r, cfg.R)
        L_G = (L_f + problem.sigma.max * (cfg.m - 1)) / cfg.m + rho
        if not step_size_ok(gamma, L_G, cfg.H):
            if warned == 0:
                log.warning("step size %.4g exceeds the theory bound (L_G=%.4g, H=%d)", gamma, L_G, cfg.H)
            warned += 1
        agents, server, rec = run_round(agents, server, cfg, problem, rngs, ref, history)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    return RunResult(records, server, agents, history, warned)
