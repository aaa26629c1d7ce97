"""Experiment configuration: a flat ``key = value`` text format or JSON.

Every key has a declared type; unknown keys, malformed values and
inconsistent lengths are rejected before any computation starts. Lines
starting with ``#`` are comments. List values are comma separated, and
``name*count`` repeats an entry (``188*4``).

Method-specific hyperparameters use a ``method.key`` prefix, for example
``fedprox.mu`` or ``scaffold.global_step``; without a prefix, ``gamma``
and ``rho`` configure PC-FedAvg.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .federation import CROSS_BLOCK_RULES, parse_schedule

METHODS = ("pcfedavg", "fedavg", "fedprox", "scaffold")
PROBLEMS = ("synthetic", "softmax_synthetic", "mnist", "cifar10", "dump")
REFERENCE_MODES = ("auto", "none", "always")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    problem: str = "synthetic"
    m: int = 4
    # quadratic problems
    n: int = 20
    kappa: float = 10.0
    noise_std: float = 1.0
    b_scale: float = 1.0
    tau_relative: bool = False
    # classification problems
    n_samples: int = 800
    n_features: int = 50
    classes: int = 3
    separation: float = 1.0
    data_dir: str = ""
    data_files: tuple[str, ...] = ()
    expected_count: int = 0
    subset: int = 0
    bias: bool = False
    partition: str = "label_shards"
    shards_per_agent: int = 2
    # shared by every problem
    tau: tuple[float, ...] = ()
    sigma: tuple[float, ...] = ()
    problem_seed: int = 0
    # algorithm settings
    methods: tuple[str, ...] = ("pcfedavg",)
    R: int = 100
    H: int = 20
    batch_fraction: float = 1.0
    gamma: str = "0.01"
    rho: str = "sqrt_r"
    cross_block: str = "algorithm"
    fedavg_gamma: float = 0.01
    fedprox_gamma: float = 0.01
    fedprox_mu: float = 0.1
    scaffold_gamma: float = 0.01
    scaffold_global_step: float = 1.0
    scaffold_sampled: int = 0
    baseline_rho: str = ""
    local_steps_grid: tuple[int, ...] = ()
    # run control
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    eval_every: int = 1
    reference: str = "auto"
    reference_tol: float = 1e-10
    reference_max_iter: int = 1_000_000
    plots: bool = True
    source: str = field(default="", compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.problem in PROBLEMS, f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        need(self.m >= 1, "m must be at least 1")
        need(len(self.sigma) == self.m, f"sigma lists {len(self.sigma)} values but m={self.m}")
        need(len(self.tau) == self.m, f"tau lists {len(self.tau)} values but m={self.m}")
        need(all(s >= 0 and math.isfinite(s) for s in self.sigma), "sigma values must be finite and non-negative")
        need(all(t > 0 for t in self.tau), "tau values must be positive (use inf for no constraint)")
        need(self.methods and all(mth in METHODS for mth in self.methods), f"methods must be drawn from {METHODS}")
        need(len(set(self.methods)) == len(self.methods), "methods must not repeat")
        need(self.R >= 1 and self.H >= 1, "R and H must be positive")
        need(0.0 < self.batch_fraction <= 1.0, "batch_fraction must lie in (0, 1]")
        need(self.cross_block in CROSS_BLOCK_RULES, f"cross_block must be one of {CROSS_BLOCK_RULES}")
        need(self.eval_every >= 1, "eval_every must be at least 1")
        need(self.reference in REFERENCE_MODES, f"reference must be one of {REFERENCE_MODES}")
        need(len(self.seeds) >= 1 and len(set(self.seeds)) == len(self.seeds), "seeds must be distinct and non-empty")
        need(all(s >= 0 for s in self.seeds), "seeds must be non-negative")
        need(self.partition in ("label_shards", "iid"), "partition must be label_shards or iid")
        need(self.fedprox_mu >= 0, "fedprox.mu must be non-negative")
        need(0 <= self.scaffold_sampled <= self.m, "scaffold.sampled must lie in [0, m]; 0 means all agents")
        need(all(h >= 1 for h in self.local_steps_grid), "local_steps_grid entries must be positive")
        for key in ("gamma", "rho"):
            try:
                parse_schedule(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if self.baseline_rho:
            try:
                parse_schedule(self.baseline_rho)
            except ValueError as exc:
                raise ConfigError(f"baseline_rho: {exc}") from None
        if self.problem == "synthetic":
            need(self.n >= 1 and self.kappa >= 1, "synthetic problems need n >= 1 and kappa >= 1")
        if self.problem in ("mnist", "cifar10", "dump"):
            need(bool(self.data_files), f"problem {self.problem} needs data_files")
            missing = [p for p in self.data_paths() if not p.exists()]
            need(not missing, "missing data files: " + ", ".join(str(p) for p in missing))
        if self.problem == "mnist":
            need(len(self.data_files) == 2, "mnist needs data_files = <images>, <labels>")

    def data_paths(self) -> list[Path]:
        if self.data_dir:
            base = Path(os.path.expandvars(self.data_dir))
        else:
            base = Path(self.source).parent if self.source else Path(".")
        paths = [Path(os.path.expandvars(p)) for p in self.data_files]
        return [p if p.is_absolute() else base / p for p in paths]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(kw)
        return ExperimentConfig(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def problem_hash(self) -> str:
        keys = ("problem", "m", "n", "kappa", "noise_std", "b_scale", "tau_relative", "n_samples", "n_features",
                "classes", "separation", "data_files", "subset", "bias", "partition", "shards_per_agent", "tau",
                "sigma", "problem_seed")
        d = self.to_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()).hexdigest()


# -- parsing -----------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name != "source"}


def _key_name(key: str) -> str:
    return key.strip().replace(".", "_").replace("-", "_")


def _split_list(text: str) -> list[str]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "*" in part:
            value, count = part.rsplit("*", 1)
            out.extend([value.strip()] * int(count))
        else:
            out.append(part)
    return out


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, value):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        return value if isinstance(value, bool) else _parse_bool(value)
    if isinstance(default, int):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ValueError(f"expected an integer, got {value!r}") from None
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = value if isinstance(value, (list, tuple)) else _split_list(str(value))
        kind = {"tau": float, "sigma": float, "seeds": int, "local_steps_grid": int}.get(name, str)
        return tuple(kind(x) if kind is not str else str(x).strip() for x in items)
    return str(value).strip()


def from_mapping(raw: dict, source: str = "") -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        name = _key_name(key)
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[name] = _coerce(name, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return ExperimentConfig(source=source, **values)


def parse_text(text: str, source: str = "") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source or '<config>'}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        if _key_name(key) in raw:
            raise ConfigError(f"{source or '<config>'}:{lineno}: duplicate key {key.strip()!r}")
        raw[_key_name(key)] = value.strip()
    return raw


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    else:
        raw = parse_text(text, str(path))
    return from_mapping(raw, str(path))


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``quadratic_small``."""
    here = Path(__file__).parent / "configs"
    path = here / (name if name.endswith((".cfg", ".json")) else name + ".cfg")
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def bundled_configs() -> list[Path]:
    return sorted((Path(__file__).parent / "configs").glob("*.cfg"))
