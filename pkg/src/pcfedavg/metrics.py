"""Reference solutions, per-round measurements, K* sampling and rate fits."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import constraints as cs
from .numerics import DTYPE, MONTE_CARLO, RngStream, stream
from .objectives import QuadraticObjective
from .problem import Problem, agent_mean

log = logging.getLogger(__name__)


class ReferenceNotConverged(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"reference solve stopped after {iterations} iterations with residual {residual:.3e}")
        self.residual = residual
        self.iterations = iterations


@dataclass(eq=False)
class ReferenceSolution:
    x_star: np.ndarray  # (m, n)
    f_star: float
    grad_norm_at_star: float
    method: str
    iterations: int = 0
    residual: float = 0.0
    x_rho_star: np.ndarray | None = None
    rho: float | None = None


@dataclass
class DiagnosticsReport:
    Q: float
    M: float
    M_stderr: float
    D: float
    L: float
    L_Grho: float


@dataclass
class RoundRecord:
    round: int
    k: int
    gamma: float
    rho: float
    global_loss: float
    subopt: float | None
    infeasibility: tuple[float, ...]
    consensus_residual: float
    kstar_flag: bool = False

    @property
    def infeas_max(self) -> float:
        return max(self.infeasibility)


def _is_analytic_unconstrained(problem: Problem) -> bool:
    return all(isinstance(S, cs.Unconstrained) for S in problem.sets) and all(
        isinstance(o, QuadraticObjective) for o in problem.oracles
    )


def _is_analytic_scaled_identity(problem: Problem) -> bool:
    if problem.m != 1 or not isinstance(problem.oracles[0], QuadraticObjective):
        return False
    Q = problem.oracles[0].Q
    c = Q[0, 0]
    return c > 0 and np.array_equal(Q, c * np.eye(Q.shape[0]))


def _finish(problem: Problem, X: np.ndarray, method: str, iterations=0, residual=0.0) -> ReferenceSolution:
    return ReferenceSolution(
        x_star=X,
        f_star=problem.objective(X),
        grad_norm_at_star=float(np.linalg.norm(problem.objective_grad(X))),
        method=method,
        iterations=iterations,
        residual=residual,
    )


def solve_reference(
    problem: Problem,
    tol: float = 1e-10,
    max_iter: int = 1_000_000,
    x0: np.ndarray | None = None,
    analytic: bool = True,
    rho: float | None = None,
) -> ReferenceSolution:
    """Minimize the stacked objective over the product of the agents' sets.

    Closed forms are used for unconstrained quadratics and for a single agent
    with a scaled-identity Hessian; otherwise projected gradient with step
    ``1/(L_f + sigma*m)`` runs until the gradient-mapping norm is below ``tol``.
    When ``rho`` is given, the minimizer of the penalized objective is also
    computed and attached as ``x_rho_star``.
    """
    if analytic and _is_analytic_unconstrained(problem):
        Qs = sum(o.Q for o in problem.oracles)
        bs = sum(o.b for o in problem.oracles)
        ref = _finish(problem, problem.replicate(np.linalg.solve(Qs, bs)), "analytic")
    elif analytic and _is_analytic_scaled_identity(problem):
        o = problem.oracles[0]
        x = problem.sets[0].project(o.b / o.Q[0, 0])
        ref = _finish(problem, x[None, :].copy(), "analytic")
    else:
        ref = _projected_gradient(problem, tol, max_iter, x0)
    if rho is not None:
        ref.x_rho_star = penalized_minimizer(problem, rho, tol=tol, max_iter=max_iter, x0=ref.x_star)
        ref.rho = rho
    return ref


def _projected_gradient(problem, tol, max_iter, x0) -> ReferenceSolution:
    L = problem.L
    X = problem.project(problem.zeros() if x0 is None else np.array(x0, dtype=DTYPE))
    resid = math.inf
    for it in range(1, max_iter + 1):
        X_new = problem.project(X - problem.objective_grad(X) / L)
        resid = L * float(np.linalg.norm(X_new - X))
        X = X_new
        if resid <= tol:
            return _finish(problem, X, f"projected_gradient({it})", it, resid)
    raise ReferenceNotConverged(resid, max_iter)


def penalized_minimizer(problem: Problem, rho: float, tol=1e-10, max_iter=1_000_000, x0=None) -> np.ndarray:
    """Unconstrained minimizer of ``f + rho * (1/m) sum_i h_i`` by gradient descent."""
    step = 1.0 / (problem.L + rho / problem.m)
    X = problem.zeros() if x0 is None else np.array(x0, dtype=DTYPE)
    resid = math.inf
    for _ in range(max_iter):
        G = problem.penalized_grad(X, rho)
        resid = float(np.linalg.norm(G))
        if resid <= tol:
            return X
        X = X - step * G
    raise ReferenceNotConverged(resid, max_iter)


def stacked_stochastic_grad(problem: Problem, X: np.ndarray, i: int, g: np.ndarray) -> np.ndarray:
    """Gradient of agent ``i``'s unpenalized stacked objective given ``g`` at the mean."""
    m = problem.m
    xbar = agent_mean(X)
    dev = X[i] - xbar
    out = np.tile(g / m - (problem.sigma[i] / m) * dev, (m, 1))
    out[i] += problem.sigma[i] * dev
    return out


def diagnostics(
    problem: Problem,
    ref: ReferenceSolution,
    rho: float,
    x0: np.ndarray | None = None,
    draws: int = 10_000,
    seed: int = 0,
    batch_fraction: float = 1.0,
) -> DiagnosticsReport:
    """Constants entering the complexity bounds, evaluated on the instance."""
    X0 = problem.zeros() if x0 is None else x0
    x_rho = ref.x_rho_star if ref.x_rho_star is not None and ref.rho == rho else penalized_minimizer(problem, rho)
    Qc = float(np.sum((X0 - x_rho) ** 2))
    xbar = agent_mean(ref.x_star)
    per_draw = np.zeros(draws)
    for i, o in enumerate(problem.oracles):
        rng = stream(seed, MONTE_CARLO, i)
        for t in range(draws):
            G = stacked_stochastic_grad(problem, ref.x_star, i, o.stochastic_grad(xbar, rng, batch_fraction))
            per_draw[t] += float(np.sum(G * G)) / problem.m
    return DiagnosticsReport(
        Q=Qc,
        M=float(per_draw.mean()),
        M_stderr=float(per_draw.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0,
        D=ref.grad_norm_at_star**2,
        L=problem.L,
        L_Grho=problem.L_G(rho),
    )


def infeasibilities(problem: Problem, X: np.ndarray) -> tuple[float, ...]:
    return tuple(cs.distance(S, X[i]) for i, S in enumerate(problem.sets))


def consensus_residual(states, Xbar: np.ndarray) -> float:
    """``(1/m) sum_i ||x_i - xbar||^2`` over the agents' stacked states."""
    total = 0.0
    for Xi in states:
        d = Xi - Xbar
        total += float(np.sum(d * d))
    return total / len(states)


def evaluate_round(
    problem: Problem,
    X: np.ndarray,
    ref: ReferenceSolution | None = None,
    states=None,
    *,
    round: int = 0,
    k: int = 0,
    gamma: float = 0.0,
    rho: float = 0.0,
    kstar_flag: bool = False,
) -> RoundRecord:
    """Measure a stacked point: block means for PC-FedAvg, a replicated model for baselines.

    The suboptimality ``f(X) - f*`` is reported signed; infeasible iterates
    can sit below the constrained optimum.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 1:
        X = problem.replicate(X)
    loss = problem.objective(X)
    return RoundRecord(
        round=round,
        k=k,
        gamma=gamma,
        rho=rho,
        global_loss=loss,
        subopt=None if ref is None else loss - ref.f_star,
        infeasibility=infeasibilities(problem, X),
        consensus_residual=0.0 if states is None else consensus_residual(states, X),
        kstar_flag=kstar_flag,
    )


def sample_kstar(K: int, rng: RngStream) -> int:
    """Uniform index in ``{0, ..., K-1}``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return rng.integer(K)


@dataclass
class RateFit:
    slope: float
    intercept: float
    half_width: float
    R: tuple[int, ...]
    means: tuple[float, ...]
    excluded: tuple[int, ...] = field(default_factory=tuple)


def _ols_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    return slope, float(ym - slope * xm)


def rate_fit(samples: dict, n_boot: int = 1000, seed: int = 0, min_seeds: int = 5) -> RateFit:
    """Least-squares slope of ``log(mean metric)`` against ``log R``.

    ``samples`` maps each R to its per-seed metric values. Grid points whose
    seed mean is not positive are dropped with a warning. The half-width is
    1.96 bootstrap standard deviations from resampling seeds within each R.
    """
    Rs = sorted(samples)
    if len(Rs) < 3:
        raise ValueError("rate fit needs at least three values of R")
    for R in Rs:
        if len(samples[R]) < min_seeds:
            raise ValueError(f"rate fit needs at least {min_seeds} seeds per R, R={R} has {len(samples[R])}")
    arrays = {R: np.asarray(samples[R], dtype=DTYPE) for R in Rs}
    means = {R: float(arrays[R].mean()) for R in Rs}
    kept = [R for R in Rs if means[R] > 0]
    excluded = tuple(R for R in Rs if means[R] <= 0)
    if excluded:
        warnings.warn(f"non-positive metric at R={excluded}; excluded from the fit", RuntimeWarning, stacklevel=2)
    if len(kept) < 2:
        raise ValueError("fewer than two usable grid points remain")
    x = np.log(np.array(kept, dtype=DTYPE))
    slope, intercept = _ols_slope(x, np.log([means[R] for R in kept]))
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        ys = []
        for R in kept:
            a = arrays[R]
            mu = a[rng.integers(0, a.size, a.size)].mean()
            ys.append(mu)
        if min(ys) > 0:
            boots.append(_ols_slope(x, np.log(ys))[0])
    half = 1.96 * float(np.std(boots, ddof=1)) if len(boots) > 1 else math.nan
    return RateFit(slope, intercept, half, tuple(kept), tuple(means[R] for R in kept), excluded)


@dataclass
class KStarSummary:
    """Metrics at the sampled output iterate and, when available, their exact K* expectation."""

    kstar: int
    subopt: float | None
    infeas_sq: float
    mean_subopt: float | None = None
    mean_infeas_sq: float | None = None


def _stacked(problem: Problem, X: np.ndarray) -> np.ndarray:
    return problem.replicate(X[0]) if X.shape[0] == 1 and problem.m > 1 else X


def _subopt_infeas(problem, X, ref):
    X = _stacked(problem, X)
    sub = None if ref is None else problem.objective(X) - ref.f_star
    return sub, max(d * d for d in infeasibilities(problem, X))


def kstar_summary(problem: Problem, history, ref: ReferenceSolution | None = None) -> KStarSummary:
    """Evaluate ``f - f*`` and ``max_i dist_i^2`` at the K* iterate.

    ``history`` is a ``KStarHistory``. If it stores every iterate, the
    expectation over the uniform K* is also computed exactly as the plain
    average over all ``K`` local steps.
    """
    sub, inf2 = _subopt_infeas(problem, history.at_kstar, ref)
    out = KStarSummary(history.kstar, sub, inf2)
    if history.iterates is not None:
        subs, infs = zip(*(_subopt_infeas(problem, X, ref) for X in history.iterates))
        out.mean_infeas_sq = float(np.mean(infs))
        out.mean_subopt = None if ref is None else float(np.mean(subs))
    return out
