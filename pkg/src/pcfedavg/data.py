"""Dataset readers, agent partitioning and synthetic problem generation.

Readers cover the MNIST IDX files and the CIFAR-10 binary batches; both
scale pixels to ``[0, 1]``. A small little-endian dump format stores any
loaded dataset so runs can skip re-parsing.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import constraints as cs
from .numerics import DTYPE, PARTITION, SYNTHETIC, stream
from .objectives import Dataset, NoisyQuadraticObjective, PersonalizationWeights, SoftmaxObjective
from .problem import Problem

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DUMP_MAGIC = 0x50434644
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<IIQQI")


class DataFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _need(buf: bytes, path, offset: int, size: int, what: str):
    if len(buf) < offset + size:
        raise DataFormatError(path, len(buf), f"truncated file: {what} needs bytes [{offset}, {offset + size})")


def _read_idx(path, magic: int, ndim_dims: int):
    buf = _read_bytes(path)
    _need(buf, path, 0, 4 + 4 * ndim_dims, "header")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise DataFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim_dims}I", buf, 4)
    start = 4 + 4 * ndim_dims
    size = int(np.prod(dims))
    _need(buf, path, start, size, "payload")
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=start)


def load_mnist(images_path, labels_path, expected_count: int | None = None, classes: int = 10) -> Dataset:
    """Read an IDX image/label pair into a ``Dataset`` with pixels scaled by 1/255."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DataFormatError(labels_path, 4, f"label count {n_lab} does not match image count {n_img}")
    if expected_count is not None and n_img != expected_count:
        raise DataFormatError(images_path, 4, f"record count {n_img}, expected {expected_count}")
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        raise DataFormatError(labels_path, 8 + int(bad[0]), f"label {labels[bad[0]]} outside [0, {classes})")
    X = pixels.reshape(n_img, rows * cols).astype(DTYPE) / 255.0
    return Dataset(X, labels.astype(np.int64), classes)


def load_cifar10(paths, expected_count: int | None = None) -> Dataset:
    """Read CIFAR-10 binary batches (label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    feats, labs = [], []
    for p in paths:
        buf = _read_bytes(p)
        if len(buf) == 0:
            raise DataFormatError(p, 0, "empty file")
        if len(buf) % CIFAR_RECORD:
            whole = len(buf) - len(buf) % CIFAR_RECORD
            raise DataFormatError(p, whole, f"size {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] >= 10)[0]
        if bad.size:
            raise DataFormatError(p, int(bad[0]) * CIFAR_RECORD, f"label {rec[bad[0], 0]} outside [0, 10)")
        labs.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:])
    X = np.concatenate(feats).astype(DTYPE) / 255.0
    y = np.concatenate(labs)
    if expected_count is not None and y.size != expected_count:
        raise ValueError(f"read {y.size} CIFAR-10 records, expected {expected_count}")
    return Dataset(X, y, 10)


def write_dump(ds: Dataset, path) -> None:
    """Store ``ds`` as header + float32 row-major features + one byte per label."""
    if ds.classes > 256:
        raise ValueError("dump format stores labels as single bytes")
    N, D = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, N, D, ds.classes))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def read_dump(path) -> Dataset:
    buf = Path(path).read_bytes()
    _need(buf, path, 0, _DUMP_HEADER.size, "header")
    magic, version, N, D, K = _DUMP_HEADER.unpack_from(buf, 0)
    if magic != DUMP_MAGIC:
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}")
    if version != DUMP_VERSION:
        raise DataFormatError(path, 4, f"unsupported version {version}")
    off = _DUMP_HEADER.size
    _need(buf, path, off, 4 * N * D + N, "payload")
    X = np.frombuffer(buf, dtype="<f4", count=N * D, offset=off).reshape(N, D).astype(DTYPE)
    y = np.frombuffer(buf, dtype=np.uint8, count=N, offset=off + 4 * N * D).astype(np.int64)
    return Dataset(X, y, K)


# -- partitioning ------------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    m: int
    scheme: str = "label_shards"  # or "iid"
    shards_per_agent: int = 2
    seed: int = 0


def partition_indices(labels: np.ndarray, plan: PartitionPlan) -> list[np.ndarray]:
    """Disjoint index sets covering ``range(len(labels))``, one per agent."""
    N = len(labels)
    if plan.m > N:
        raise ValueError(f"cannot split {N} samples across {plan.m} agents")
    rng = stream(plan.seed, PARTITION)
    if plan.scheme == "iid":
        perm = rng.permutation(N)
        base, extra = divmod(N, plan.m)
        sizes = [base + (1 if i < extra else 0) for i in range(plan.m)]
        cuts = np.cumsum([0] + sizes)
        return [np.sort(perm[cuts[i]:cuts[i + 1]]) for i in range(plan.m)]
    if plan.scheme == "label_shards":
        n_shards = plan.m * plan.shards_per_agent
        if n_shards > N:
            raise ValueError(f"{n_shards} shards requested for {N} samples")
        order = np.argsort(labels, kind="stable")
        shards = np.array_split(order, n_shards)
        deal = rng.permutation(n_shards)
        s = plan.shards_per_agent
        return [np.sort(np.concatenate([shards[j] for j in deal[i * s:(i + 1) * s]])) for i in range(plan.m)]
    raise ValueError(f"unknown partition scheme {plan.scheme!r}")


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    return [ds.subset(idx) for idx in partition_indices(ds.labels, plan)]


def stratified_subset(ds: Dataset, size: int = 1000, seed: int = 0) -> Dataset:
    """Deterministic class-proportional subset (largest-remainder allocation)."""
    if size >= ds.n_samples:
        return ds
    counts = np.bincount(ds.labels, minlength=ds.classes)
    quota = counts * size / ds.n_samples
    take = np.floor(quota).astype(int)
    order = np.argsort(-(quota - take), kind="stable")
    take[order[: size - take.sum()]] += 1
    rng = stream(seed, PARTITION, 1)
    picked = []
    for c in range(ds.classes):
        members = np.nonzero(ds.labels == c)[0]
        picked.append(members[rng.permutation(members.size)[: take[c]]])
    return ds.subset(np.sort(np.concatenate(picked)))


# -- synthetic problems ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticProblemSpec:
    """Quadratic agents ``0.5 x'Q_i x - b_i'x`` with l1-ball constraints.

    ``tau`` gives the radii directly, or, with ``tau_relative=True``, as
    fractions of the l1 norm of the unconstrained minimizer so the balls are
    guaranteed to cut it off.
    """

    m: int = 4
    n: int = 20
    kappa: float = 10.0
    noise_std: float = 1.0
    tau: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8)
    sigma: tuple[float, ...] = (0.1, 0.1, 0.1, 0.1)
    tau_relative: bool = True
    b_scale: float = 1.0

    def __post_init__(self):
        if len(self.tau) != self.m or len(self.sigma) != self.m:
            raise ValueError("tau and sigma need one entry per agent")
        if self.kappa < 1:
            raise ValueError("kappa must be at least 1")


def random_spd(n: int, kappa: float, rng) -> np.ndarray:
    """``U' diag(lam) U`` with log-uniform eigenvalues spanning ``[1, kappa]``."""
    if kappa == 1.0:
        return np.eye(n, dtype=DTYPE)
    U, _ = np.linalg.qr(rng.normal(n * n).reshape(n, n))
    inner = np.exp(rng.uniform(max(n - 2, 0)) * math.log(kappa))
    lam = np.concatenate([[1.0, kappa], inner])[:n]
    Q = U.T @ np.diag(lam) @ U
    return 0.5 * (Q + Q.T)


def make_synthetic(spec: SyntheticProblemSpec, seed: int = 0) -> Problem:
    rng = stream(seed, SYNTHETIC)
    Qs = [random_spd(spec.n, spec.kappa, rng) for _ in range(spec.m)]
    bs = [spec.b_scale * rng.normal(spec.n) for _ in range(spec.m)]
    taus = list(spec.tau)
    if spec.tau_relative:
        x_unc = np.linalg.solve(sum(Qs), sum(bs))
        scale = float(np.abs(x_unc).sum())
        taus = [t * scale for t in taus]
    oracles = [NoisyQuadraticObjective(Q, b, spec.noise_std) for Q, b in zip(Qs, bs)]
    return Problem(oracles, [cs.from_tau(t) for t in taus], PersonalizationWeights(spec.sigma))


def make_classification(n_samples: int, n_features: int, classes: int, seed: int = 0,
                        separation: float = 1.0) -> Dataset:
    """Gaussian class clusters rescaled feature-wise into ``[0, 1]``."""
    rng = stream(seed, SYNTHETIC, 1)
    centers = separation * rng.normal(classes * n_features).reshape(classes, n_features)
    y = np.arange(n_samples) % classes
    X = centers[y] + rng.normal(n_samples * n_features).reshape(n_samples, n_features)
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = (X - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(X, y, classes)


def softmax_problem(parts: list[Dataset], tau, sigma) -> Problem:
    if len(tau) != len(parts) or len(sigma) != len(parts):
        raise ValueError("tau and sigma need one entry per agent")
    return Problem([SoftmaxObjective(d) for d in parts], [cs.from_tau(float(t)) for t in tau],
                   PersonalizationWeights(tuple(sigma)))
