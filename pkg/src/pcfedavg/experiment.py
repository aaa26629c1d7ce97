"""Experiment orchestration: problems, references, per-seed runs and CSV output.

Layout under the output directory::

    manifest.json
    reference.npz                     (when a reference is solved or cached)
    <method>/seed_<s>/rounds.csv
    <method>/seed_<s>/summary.csv
    <method>/seed_<s>/final_state.npy
    figures/<figure>.csv (+ .png)

Floats are written with ``repr`` so a replay reproduces every file byte for
byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import data as dt
from . import federation as fd
from . import metrics as mt
from .config import ExperimentConfig, from_mapping
from .objectives import QuadraticObjective
from .problem import Problem

log = logging.getLogger(__name__)

RATE_THRESHOLDS = {"subopt": (-0.5, -0.35), "infeas_sq": (-1.0, -0.7)}


# -- problems and references -------------------------------------------------


def _load_dataset(cfg: ExperimentConfig):
    paths = cfg.data_paths()
    expected = cfg.expected_count or None
    if cfg.problem == "mnist":
        ds = dt.load_mnist(paths[0], paths[1], expected)
    elif cfg.problem == "cifar10":
        ds = dt.load_cifar10(paths, expected)
    elif cfg.problem == "dump":
        ds = dt.read_dump(paths[0])
    else:
        ds = dt.make_classification(cfg.n_samples, cfg.n_features, cfg.classes, cfg.problem_seed, cfg.separation)
    if cfg.subset:
        ds = dt.stratified_subset(ds, cfg.subset, cfg.problem_seed)
    return ds.with_bias() if cfg.bias else ds


_PROBLEMS: dict = {}
_REFERENCES: dict = {}


def _make_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.problem == "synthetic":
        spec = dt.SyntheticProblemSpec(
            m=cfg.m, n=cfg.n, kappa=cfg.kappa, noise_std=cfg.noise_std, tau=cfg.tau, sigma=cfg.sigma,
            tau_relative=cfg.tau_relative, b_scale=cfg.b_scale,
        )
        return dt.make_synthetic(spec, cfg.problem_seed)
    ds = _load_dataset(cfg)
    plan = dt.PartitionPlan(cfg.m, cfg.partition, cfg.shards_per_agent, cfg.problem_seed)
    return dt.softmax_problem(dt.partition(ds, plan), cfg.tau, cfg.sigma)


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Construct (and memoize per process) the problem a config describes."""
    key = cfg.problem_hash()
    if key not in _PROBLEMS:
        _PROBLEMS[key] = _make_problem(cfg)
    return _PROBLEMS[key]


def _wants_reference(cfg: ExperimentConfig, problem: Problem) -> bool:
    if cfg.reference == "none":
        return False
    if cfg.reference == "always":
        return True
    return all(isinstance(o, QuadraticObjective) for o in problem.oracles)


def reference_path(out_dir) -> Path:
    return Path(out_dir) / "reference.npz"


def save_reference(ref: mt.ReferenceSolution, path, problem_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, x_star=ref.x_star, f_star=ref.f_star, grad_norm=ref.grad_norm_at_star,
                 iterations=ref.iterations, residual=ref.residual, method=ref.method, problem_hash=problem_hash)


def load_reference(path, problem_hash: str) -> mt.ReferenceSolution | None:
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as z:
        if str(z["problem_hash"]) != problem_hash:
            return None
        return mt.ReferenceSolution(
            x_star=z["x_star"], f_star=float(z["f_star"]), grad_norm_at_star=float(z["grad_norm"]),
            method=str(z["method"]), iterations=int(z["iterations"]), residual=float(z["residual"]),
        )


def solve_or_load_reference(cfg: ExperimentConfig, problem: Problem, out_dir=None, force=False):
    """Reference for ``cfg``: cached ``reference.npz`` if it matches, else a fresh solve."""
    if not force and not _wants_reference(cfg, problem):
        return None
    key = cfg.problem_hash()
    if out_dir is not None:
        ref = load_reference(reference_path(out_dir), key)
        if ref is not None:
            return ref
    ref = _REFERENCES.get(key)
    if ref is None:
        ref = mt.solve_reference(problem, tol=cfg.reference_tol, max_iter=cfg.reference_max_iter)
        _REFERENCES[key] = ref
    if out_dir is not None:
        save_reference(ref, reference_path(out_dir), key)
    return ref


# -- per-seed runs -----------------------------------------------------------


def rounds_header(m: int) -> list[str]:
    return (["round", "k", "gamma", "rho", "global_loss", "subopt"] + [f"infeas_{i + 1}" for i in range(m)]
            + ["infeas_max", "consensus_residual", "kstar_flag"])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def record_row(rec: mt.RoundRecord) -> list[str]:
    return ([_fmt(rec.round), _fmt(rec.k), _fmt(rec.gamma), _fmt(rec.rho), _fmt(rec.global_loss), _fmt(rec.subopt)]
            + [_fmt(d) for d in rec.infeasibility]
            + [_fmt(rec.infeas_max), _fmt(rec.consensus_residual), _fmt(bool(rec.kstar_flag))])


def _csv_line(row) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(row)
    return buf.getvalue()


SUMMARY_COLUMNS = ["method", "seed", "R", "H", "K", "kstar", "final_loss", "final_subopt", "final_infeas_max",
                   "final_consensus_residual", "kstar_subopt", "kstar_infeas_sq", "mean_subopt", "mean_infeas_sq",
                   "f_star", "step_size_warnings"]


@dataclass(frozen=True)
class Job:
    method: str
    seed: int
    H: int
    label: str


def run_method(cfg: ExperimentConfig, problem: Problem, method: str, seed: int, ref=None, H=None,
               keep_history=None, on_round=None) -> fd.RunResult:
    """Run one method for one seed from the zero initialization."""
    H = cfg.H if H is None else H
    if method == "pcfedavg":
        fcfg = fd.FederationConfig(
            m=problem.m, n=problem.n, H=H, R=cfg.R, gamma=fd.parse_schedule(cfg.gamma),
            rho=fd.parse_schedule(cfg.rho), seed=seed, batch_fraction=cfg.batch_fraction,
            cross_block=cfg.cross_block,
        )
        return fd.run_pcfedavg(problem, fcfg, ref, keep_history=keep_history, on_round=on_round)
    if method == "fedavg":
        spec, gamma = bl.FedAvg(), cfg.fedavg_gamma
    elif method == "fedprox":
        spec, gamma = bl.FedProx(cfg.fedprox_mu), cfg.fedprox_gamma
    elif method == "scaffold":
        spec, gamma = bl.Scaffold(cfg.scaffold_global_step, cfg.scaffold_sampled or None), cfg.scaffold_gamma
    else:
        raise ValueError(f"unknown method {method!r}")
    bcfg = bl.BaselineConfig(spec, gamma, fd.parse_schedule(cfg.baseline_rho or cfg.rho), H, cfg.R, problem.m,
                             seed=seed, batch_fraction=cfg.batch_fraction)
    return bl.run_baseline(problem, bcfg, ref, keep_history=keep_history, on_round=on_round)


def _run_job(cfg_dict: dict, source: str, job: Job, ref, out_dir: str) -> dict:
    cfg = from_mapping(cfg_dict, source)
    run_dir = Path(out_dir) / job.label / f"seed_{job.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    rounds_path = run_dir / "rounds.csv"
    entry = {"method": job.method, "label": job.label, "seed": job.seed, "H": job.H,
             "rounds_csv": str(rounds_path), "summary_csv": str(run_dir / "summary.csv"), "status": "running"}
    try:
        problem = build_problem(cfg)
        with open(rounds_path, "w", newline="") as fh:
            fh.write(_csv_line(rounds_header(problem.m)))

            def on_round(rec):
                if (rec.round + 1) % cfg.eval_every == 0 or rec.round == cfg.R - 1:
                    fh.write(_csv_line(record_row(rec)))

            res = run_method(cfg, problem, job.method, job.seed, ref, job.H, on_round=on_round)
        final = res.server.block_means if job.method == "pcfedavg" else res.extra["model"]
        np.save(run_dir / "final_state.npy", final)
        ks = mt.kstar_summary(problem, res.history, ref)
        last = res.records[-1]
        row = [job.label, job.seed, cfg.R, job.H, cfg.R * job.H, ks.kstar, last.global_loss, last.subopt,
               last.infeas_max, last.consensus_residual, ks.subopt, ks.infeas_sq, ks.mean_subopt,
               ks.mean_infeas_sq, None if ref is None else ref.f_star, res.step_size_warnings]
        with open(run_dir / "summary.csv", "w", newline="") as fh:
            fh.write(_csv_line(SUMMARY_COLUMNS))
            fh.write(_csv_line([v if isinstance(v, str) else _fmt(v) for v in row]))
        entry["status"] = "complete"
    except Exception as exc:  # recorded in the manifest; partial files stay on disk
        log.error("%s seed %d failed: %s", job.label, job.seed, exc)
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"
    return entry


@dataclass
class RunManifest:
    config_hash: str
    version: str
    output_dir: str
    runs: list = field(default_factory=list)
    status: str = "running"
    started: float = 0.0
    wall_clock_s: float | None = None
    figures: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.output_dir) / "manifest.json"

    def write(self) -> None:
        Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        body = {k: getattr(self, k) for k in ("config_hash", "version", "status", "started", "wall_clock_s",
                                               "runs", "figures", "missing", "config")}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(body, indent=2, sort_keys=True))
        os.replace(tmp, self.path)


def _jobs(cfg: ExperimentConfig, seeds) -> list[Job]:
    jobs = [Job(mth, s, cfg.H, mth) for mth in cfg.methods for s in seeds]
    jobs += [Job("pcfedavg", s, h, f"pcfedavg_H{h}") for h in cfg.local_steps_grid for s in seeds]
    return jobs


def _map_jobs(fn, args_list, workers: int):
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def run_experiment(cfg: ExperimentConfig, seeds=None, out_dir=None, workers: int = 1) -> RunManifest:
    """Run every configured method for every seed and emit the figure data.

    The manifest is written before any compute with ``status = running`` and
    rewritten at the end as ``complete`` or ``failed``.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    out = Path(cfg.output_dir if out_dir is None else out_dir)
    manifest = RunManifest(cfg.hash(), __version__, str(out), started=time.time(), config=cfg.to_dict())
    manifest.write()
    t0 = time.perf_counter()
    try:
        problem = build_problem(cfg)
        ref = solve_or_load_reference(cfg, problem, out)
    except Exception as exc:
        manifest.status = "failed"
        manifest.runs.append({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        manifest.wall_clock_s = time.perf_counter() - t0
        manifest.write()
        raise
    jobs = _jobs(cfg, seeds)
    raw = cfg.to_dict()
    manifest.runs = _map_jobs(_run_job, [(raw, cfg.source, j, ref, str(out)) for j in jobs], workers)
    ok = all(r["status"] == "complete" for r in manifest.runs)
    figures, missing = emit_plot_data(out, cfg.methods, seeds, cfg.local_steps_grid)
    manifest.figures = [str(p) for p in figures]
    manifest.missing = missing
    if cfg.plots and figures:
        from .plotting import render_figures

        manifest.figures += [str(p) for p in render_figures(figures)]
    manifest.status = "complete" if ok else "failed"
    manifest.wall_clock_s = time.perf_counter() - t0
    manifest.write()
    return manifest


# -- figure data -------------------------------------------------------------


def _read_rounds(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(out_dir, methods, seeds, local_steps_grid=()) -> tuple[list[Path], list[str]]:
    """Write one tidy ``round,method,seed,value`` CSV per figure.

    Runs that are missing on disk are skipped and returned in the second
    element so callers can report them.
    """
    out = Path(out_dir)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    series = {
        "infeasibility": ([(m, m) for m in methods], "infeas_max"),
        "global_loss": ([(m, m) for m in methods], "global_loss"),
    }
    if local_steps_grid:
        series["local_steps"] = ([(f"pcfedavg_H{h}", f"H={h}") for h in local_steps_grid], "global_loss")
    written, missing = [], []
    for fig, (labels, column) in series.items():
        rows = []
        for label, shown in labels:
            for s in seeds:
                path = out / label / f"seed_{s}" / "rounds.csv"
                if not path.exists():
                    if f"{label}/seed_{s}" not in missing:
                        missing.append(f"{label}/seed_{s}")
                    continue
                rows += [[r["round"], shown, str(s), r[column]] for r in _read_rounds(path)]
        if not rows:
            continue
        path = fig_dir / f"{fig}.csv"
        with open(path, "w", newline="") as fh:
            fh.write(_csv_line(["round", "method", "seed", "value"]))
            for row in rows:
                fh.write(_csv_line(row))
        written.append(path)
    for name in missing:
        log.warning("figure data: no run found for %s; skipped", name)
    return written, missing


# -- rate study --------------------------------------------------------------


@dataclass
class RateReport:
    fits: dict  # metric -> RateFit
    samples: dict  # metric -> {R: [per-seed values]}
    passed: dict  # metric -> bool
    path: Path | None = None

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


def _rate_scale(cfg: ExperimentConfig) -> float:
    s = fd.parse_schedule(cfg.gamma)
    if isinstance(s, fd.InvSqrtR):
        return s.scale
    if isinstance(s, fd.Constant):
        return s.value
    raise ValueError("rate study needs gamma = inv_sqrt_r:<c> (or a constant c)")


def _rate_job(cfg_dict: dict, source: str, R: int, seed: int, estimator: str) -> tuple[float, float]:
    cfg = from_mapping(cfg_dict, source)
    problem = build_problem(cfg)
    ref = solve_or_load_reference(cfg, problem, force=True)
    res = run_method(cfg, problem, "pcfedavg", seed, ref, keep_history=(estimator == "expectation"))
    ks = mt.kstar_summary(problem, res.history, ref)
    if estimator == "expectation":
        return ks.mean_subopt, ks.mean_infeas_sq
    return ks.subopt, ks.infeas_sq


def power_law_samples(r_grid, n_seeds: int, exponents=(-0.5, -1.0), scale=(1.0, 1.0)) -> dict:
    """Exact power-law metric values, used to check the fitting pipeline in isolation."""
    return {
        name: {R: [c * R**p] * n_seeds for R in r_grid}
        for name, p, c in zip(("subopt", "infeas_sq"), exponents, scale)
    }


def run_rate_study(cfg: ExperimentConfig, r_grid, n_seeds: int = 10, out_dir=None, workers: int = 1,
                   estimator: str = "expectation", stub: bool = False, n_boot: int = 1000) -> RateReport:
    """Fit log-log slopes of suboptimality and squared infeasibility against R.

    Each R runs PC-FedAvg with ``rho = sqrt(R)`` and ``gamma = c / sqrt(R)``.
    ``estimator = "expectation"`` averages each metric over all K iterates,
    which is the exact expectation over the uniform K*; ``"sample"`` uses the
    single drawn K* iterate. ``stub = True`` skips the engine and fits exact
    power laws.
    """
    r_grid = [int(R) for R in r_grid]
    if len(r_grid) < 3:
        raise ValueError("rate study needs at least three values of R")
    if r_grid != sorted(set(r_grid)) or r_grid[0] < 1:
        raise ValueError("R grid must be strictly increasing positive integers")
    if estimator not in ("expectation", "sample"):
        raise ValueError("estimator must be expectation or sample")
    if stub:
        samples = power_law_samples(r_grid, n_seeds)
    else:
        c = _rate_scale(cfg)
        args = []
        for R in r_grid:
            rcfg = cfg.with_overrides(R=R, gamma=f"inv_sqrt_r:{c!r}", rho="sqrt_r", methods=("pcfedavg",))
            args += [(rcfg.to_dict(), cfg.source, R, s, estimator) for s in range(n_seeds)]
        values = _map_jobs(_rate_job, args, workers)
        samples = {"subopt": {R: [] for R in r_grid}, "infeas_sq": {R: [] for R in r_grid}}
        for (_, _, R, _, _), (sub, inf2) in zip(args, values):
            samples["subopt"][R].append(sub)
            samples["infeas_sq"][R].append(inf2)
    fits, passed = {}, {}
    for name, per_r in samples.items():
        fits[name] = mt.rate_fit(per_r, n_boot=n_boot, seed=0, min_seeds=min(5, n_seeds))
        passed[name] = fits[name].slope <= RATE_THRESHOLDS[name][1]
    report = RateReport(fits, samples, passed)
    if out_dir is not None:
        report.path = write_rates(report, out_dir)
    return report


def write_rates(report: RateReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "rates.csv"
    with open(path, "w", newline="") as fh:
        fh.write(_csv_line(["metric", "slope", "half_width", "target", "threshold", "passed", "R", "means"]))
        for name, fit in report.fits.items():
            target, thr = RATE_THRESHOLDS[name]
            fh.write(_csv_line([name, _fmt(fit.slope), _fmt(fit.half_width), _fmt(target), _fmt(thr),
                                _fmt(report.passed[name]), ";".join(map(str, fit.R)),
                                ";".join(_fmt(v) for v in fit.means)]))
    with open(out / "rate_samples.csv", "w", newline="") as fh:
        fh.write(_csv_line(["metric", "R", "seed", "value"]))
        for name, per_r in report.samples.items():
            for R, vals in per_r.items():
                for s, v in enumerate(vals):
                    fh.write(_csv_line([name, R, s, _fmt(v)]))
    return path
