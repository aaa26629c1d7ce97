import numpy as np
import pytest

from oracles import central_diff, rel_err, scaffold_two_rounds, sgd_trajectory
from pcfedavg import baselines as bl
from pcfedavg import constraints as cs
from pcfedavg import data as dt
from pcfedavg import federation as fd
from pcfedavg.numerics import MINIBATCH, RngStream, stream
from pcfedavg.objectives import NoisyQuadraticObjective, QuadraticObjective, SoftmaxObjective
from pcfedavg.problem import Problem


def _quads(m=2, n=2, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    Qs, bs = [], []
    for _ in range(m):
        A = rng.standard_normal((n, n))
        Qs.append(A @ A.T / n + np.eye(n))
        bs.append(rng.standard_normal(n))
    return Qs, bs, [NoisyQuadraticObjective(Q, b, noise) for Q, b in zip(Qs, bs)]


def test_penalized_local_grad_cases():
    ds = dt.make_classification(40, 4, 3, seed=1)
    o = SoftmaxObjective(ds)
    W = np.full(12, 0.01)
    assert np.array_equal(bl.penalized_local_grad(o, cs.L1Ball(10.0), 3.0, W, RngStream(0)), o.grad(W))
    g0 = bl.penalized_local_grad(o, cs.L1Ball(0.01), 0.0, W, RngStream(5), 0.25)
    assert np.array_equal(g0, o.stochastic_grad(W, RngStream(5), 0.25))
    S, rho = cs.L1Ball(0.5), 4.0
    for seed in range(5):
        W = np.random.default_rng(seed).standard_normal(12)
        fd_grad = central_diff(lambda v: o.loss(v) + 0.5 * rho * cs.distance_sq(S, v), W)
        assert rel_err(bl.penalized_local_grad(o, S, rho, W, RngStream(0)), fd_grad) < 1e-5


def test_single_agent_fedavg_is_sgd():
    _, _, (o,) = _quads(1, 3, noise=1.0)
    p = Problem([o], [cs.Unconstrained()], [0.0])
    cfg = bl.BaselineConfig(bl.FedAvg(), 0.05, fd.Constant(0.0), 10, 20, 1, seed=4)
    res = bl.run_baseline(p, cfg)
    rng = stream(4, MINIBATCH, 0)
    traj = sgd_trajectory(lambda x: o.stochastic_grad(x, rng), np.zeros(3), 0.05, 200)
    assert np.max(np.abs(res.extra["model"] - traj[-1])) < 1e-10
    assert np.max(np.abs(res.history.iterates[:, 0, :] - np.array(traj[:200]))) < 1e-10


def test_fedprox_without_proximal_term_is_fedavg():
    _, _, oracles = _quads(3, 4, noise=0.5)
    p = Problem(oracles, [cs.L1Ball(0.5)] * 3, [0.0] * 3)
    a = bl.run_baseline(p, bl.BaselineConfig(bl.FedAvg(), 0.05, fd.SqrtR(), 5, 6, 3, seed=2))
    b = bl.run_baseline(p, bl.BaselineConfig(bl.FedProx(0.0), 0.05, fd.SqrtR(), 5, 6, 3, seed=2))
    assert a.records == b.records
    assert np.array_equal(a.extra["model"], b.extra["model"])
    c = bl.run_baseline(p, bl.BaselineConfig(bl.FedProx(1.0), 0.05, fd.SqrtR(), 5, 6, 3, seed=2))
    assert not np.array_equal(a.extra["model"], c.extra["model"])


@pytest.mark.parametrize("global_step", [1.0, 0.5])
def test_scaffold_matches_two_round_linear_map(global_step):
    Qs, bs, oracles = _quads(2, 2, seed=3)
    p = Problem(oracles, [cs.Unconstrained()] * 2, [0.0] * 2)
    W0, gamma = np.array([0.4, -0.7]), 0.1
    cfg = bl.BaselineConfig(bl.Scaffold(global_step), gamma, fd.Constant(0.0), 1, 2, 2)
    rngs = [stream(0, MINIBATCH, i) for i in range(2)]
    control = bl.ScaffoldControl.zeros(2, 2)
    sampler = stream(0, 0)
    want = scaffold_two_rounds(Qs, bs, W0, gamma, global_step)
    W = W0
    for r in range(2):
        W, _ = bl.run_fedscaffold_round(W, r, cfg, p, rngs, control, sampler)
        W_ref, c_ref, ci_ref = want[r]
        assert np.max(np.abs(W - W_ref)) < 1e-13
        assert np.max(np.abs(control.server_control - c_ref)) < 1e-13
        assert np.max(np.abs(control.agent_controls - np.array(ci_ref))) < 1e-13


def test_scaffold_control_mean_identity_under_full_participation():
    _, _, oracles = _quads(4, 5, seed=1, noise=1.0)
    p = Problem(oracles, [cs.L1Ball(1.0)] * 4, [0.0] * 4)
    cfg = bl.BaselineConfig(bl.Scaffold(1.0), 0.05, fd.SqrtR(), 3, 8, 4, seed=1)
    rngs = [stream(1, MINIBATCH, i) for i in range(4)]
    control, W = bl.ScaffoldControl.zeros(4, 5), np.zeros(5)
    for r in range(8):
        W, _ = bl.run_fedscaffold_round(W, r, cfg, p, rngs, control, stream(1, 0))
        assert np.max(np.abs(control.server_control - control.agent_controls.mean(axis=0))) < 1e-10


def test_scaffold_partial_participation_updates_only_sampled_agents():
    _, _, oracles = _quads(4, 3, seed=2)
    p = Problem(oracles, [cs.Unconstrained()] * 4, [0.0] * 4)
    cfg = bl.BaselineConfig(bl.Scaffold(1.0, 2), 0.05, fd.Constant(0.0), 2, 1, 4)
    control = bl.ScaffoldControl.zeros(4, 3)
    bl.run_fedscaffold_round(np.ones(3), 0, cfg, p, [RngStream(0, i) for i in range(4)], control, RngStream(9))
    touched = [i for i in range(4) if np.any(control.agent_controls[i])]
    assert len(touched) == 2
    with pytest.raises(ValueError):
        bl.BaselineConfig(bl.Scaffold(1.0, 5), 0.05, fd.Constant(0.0), 2, 1, 4)


def test_local_models_start_from_the_broadcast_model():
    _, _, oracles = _quads(3, 2, noise=1.0)
    p = Problem(oracles, [cs.L1Ball(0.3)] * 3, [0.0] * 3)
    cfg = bl.BaselineConfig(bl.FedAvg(), 0.05, fd.SqrtR(), 4, 1, 3)
    traces = {}
    W = np.array([0.1, 0.2])
    bl.run_fedavg_round(W, 0, cfg, p, [RngStream(0, i) for i in range(3)], traces=traces)
    assert all(np.array_equal(traces[i][0], W) for i in range(3))


def test_larger_penalty_keeps_model_closer_to_the_set():
    Q = np.diag([1.0, 2.0, 3.0])
    for seed in range(3):
        rng = np.random.default_rng(seed)
        oracles = [NoisyQuadraticObjective(Q, 5 * rng.standard_normal(3), 0.3) for _ in range(3)]
        p = Problem(oracles, [cs.L1Ball(0.5)] * 3, [0.0] * 3)
        dists = []
        for rho in (1.0, 10.0, 100.0):
            res = bl.run_baseline(p, bl.BaselineConfig(bl.FedAvg(), 0.005, fd.Constant(rho), 5, 40, 3, seed=seed))
            dists.append(cs.distance_sq(p.sets[0], res.extra["model"]))
        assert dists[0] >= dists[1] >= dists[2]


def test_baseline_records_use_distance_of_the_shared_model():
    _, _, oracles = _quads(2, 2, noise=0.0)
    sets = [cs.L1Ball(0.1), cs.L1Ball(0.2)]
    p = Problem(oracles, sets, [0.0, 0.0])
    res = bl.run_baseline(p, bl.BaselineConfig(bl.FedAvg(), 0.1, fd.Constant(0.5), 3, 4, 2))
    W = res.extra["model"]
    assert res.records[-1].infeasibility == tuple(cs.distance(S, W) for S in sets)
