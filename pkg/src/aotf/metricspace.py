"""Distances between pre-trained filter snapshots and medoid clustering.

Three record distances are supported:
  * w2    -- empirical Wasserstein-2 between state clouds (exact assignment).
  * mmd   -- RBF maximum mean discrepancy between state clouds.
  * tdist -- mean Euclidean gap between the two maps' transported particles.

Records cluster by partitioning around medoids on the pairwise matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import diffnet
from .ensemble import JointSample, joint_sample_from_csv, joint_sample_to_csv
from .otf import TransportMapModel, load_transport_model, save_transport_model

W2 = "w2"
MMD = "mmd"
TDIST = "tdist"
METRIC_KINDS = (W2, MMD, TDIST)

W2_DEFAULT_CAP = 512
SYMMETRY_TOL = 1e-9


@dataclass
class PretrainedRecord:
    """One library entry: the step's joint samples plus the map trained on them."""

    samples: JointSample
    model: TransportMapModel
    record_id: int
    sim_seed: int = 0
    time_index: int = 0

    def __post_init__(self) -> None:
        if self.samples.count < 1:
            raise ValueError("record samples must be nonempty")
        if (self.samples.x.shape[1] != self.model.state_dim
                or self.samples.y.shape[1] != self.model.obs_dim):
            raise ValueError("sample dims do not match the record's map")


@dataclass
class DistanceMatrix:
    entries: np.ndarray
    metric_kind: str
    seed: int = 0

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=float)
        m = self.entries.shape[0]
        if self.entries.shape != (m, m) or m < 1:
            raise ValueError("entries must be a square matrix")
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.metric_kind!r}")
        if np.max(np.abs(self.entries - self.entries.T)) > SYMMETRY_TOL:
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.abs(np.diag(self.entries)) > SYMMETRY_TOL):
            raise ValueError("distance matrix must have a zero diagonal")
        if np.any(self.entries < 0):
            raise ValueError("distances must be nonnegative")

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass
class MedoidLibrary:
    """K representative records plus the clustering that selected them.

    medoids is None when the clustering was computed from a bare distance
    matrix; attach_records fills it from the original record sequence.
    """

    medoid_indices: np.ndarray
    assignment: np.ndarray
    total_cost: float
    metric_kind: str
    medoids: list[PretrainedRecord] | None = None

    def __post_init__(self) -> None:
        self.medoid_indices = np.asarray(self.medoid_indices, dtype=int)
        self.assignment = np.asarray(self.assignment, dtype=int)
        if len(set(self.medoid_indices.tolist())) != len(self.medoid_indices):
            raise ValueError("medoid indices must be distinct")
        if np.any(self.assignment < 0) or np.any(self.assignment >= len(self.medoid_indices)):
            raise ValueError("every assignment label must point to a medoid")

    @property
    def k(self) -> int:
        return len(self.medoid_indices)

    def attach_records(self, records) -> "MedoidLibrary":
        self.medoids = [records[i] for i in self.medoid_indices]
        return self


def _subsample(cloud: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if cloud.shape[0] <= size:
        return cloud
    return cloud[rng.choice(cloud.shape[0], size=size, replace=False)]


def w2_empirical(a: np.ndarray, b: np.ndarray, seed: int = 0,
                 cap: int = W2_DEFAULT_CAP, method: str = "exact",
                 epsilon: float = 0.05, max_iter: int = 500) -> float:
    """Empirical Wasserstein-2 distance between two point clouds.

    Unequal sizes are reconciled by uniform subsampling of the larger cloud,
    and both clouds are capped (default 512) before the cubic assignment
    solve; both draws are seed-deterministic. method="exact" solves the
    linear assignment on the squared-distance cost; method="sinkhorn" is an
    entropically regularized fast path (epsilon in pooled-std-squared units)
    that upper-bounds the exact value.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("point clouds must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point clouds must share a dimension")
    rng = np.random.default_rng(seed)
    target = min(a.shape[0], b.shape[0], cap)
    a = _subsample(a, target, rng)
    b = _subsample(b, target, rng)
    cost = cdist(a, b, "sqeuclidean")
    if method == "exact":
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean()))
    if method == "sinkhorn":
        return _sinkhorn_w2(a, b, cost, epsilon, max_iter)
    raise ValueError(f"unknown w2 method {method!r}")


def _sinkhorn_w2(a: np.ndarray, b: np.ndarray, cost: np.ndarray,
                 epsilon: float, max_iter: int) -> float:
    """Log-domain Sinkhorn on uniform marginals; returns sqrt(transport cost).

    epsilon is scaled by the pooled per-coordinate variance, so the default
    regularization behaves like 0.05 on standardized data.
    """
    pooled_var = float(np.vstack([a, b]).var(axis=0).mean())
    eps = max(epsilon * max(pooled_var, 1e-12), 1e-12)
    n = cost.shape[0]
    log_marginal = -np.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    for _ in range(max_iter):
        f_prev = f
        f = eps * log_marginal - eps * _logsumexp_rows((g[None, :] - cost) / eps, axis=1)
        g = eps * log_marginal - eps * _logsumexp_rows((f[:, None] - cost) / eps, axis=0)
        if np.max(np.abs(f - f_prev)) < 1e-9:
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    plan /= plan.sum()
    return float(np.sqrt(np.sum(plan * cost)))


def _logsumexp_rows(mat: np.ndarray, axis: int = 1) -> np.ndarray:
    top = np.max(mat, axis=axis, keepdims=True)
    out = top + np.log(np.sum(np.exp(mat - top), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def mmd_rbf(a: np.ndarray, b: np.ndarray, lengthscale: float = 1.0) -> float:
    """Biased (V-statistic) RBF maximum mean discrepancy between two clouds.

    Both clouds are standardized jointly (pooled mean/std) before the kernel
    k(u, v) = exp(-||u-v||^2 / (2 lengthscale^2)) is evaluated, so the default
    lengthscale of 1 is in pooled-std units.
    """
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("point clouds must be nonempty")
    pooled = np.vstack([a, b])
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    a = (a - mean) / std
    b = (b - mean) / std
    gamma = 1.0 / (2.0 * lengthscale * lengthscale)
    k_aa = np.exp(-gamma * cdist(a, a, "sqeuclidean")).mean()
    k_bb = np.exp(-gamma * cdist(b, b, "sqeuclidean")).mean()
    k_ab = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return float(np.sqrt(max(k_aa + k_bb - 2.0 * k_ab, 0.0)))


def _pair_rng(a_id: int, b_id: int, seed: int) -> np.random.Generator:
    lo, hi = sorted((int(a_id), int(b_id)))
    return np.random.default_rng([seed, lo, hi])


def t_dist(u: PretrainedRecord, v: PretrainedRecord, seed: int = 0) -> float:
    """Mean transported-particle gap between two maps, evaluated on both
    records' own samples with a shared seed-derived shuffled pairing.

    The permutation seed depends only on the unordered id pair, so
    t_dist(u, v, s) == t_dist(v, u, s) exactly.
    """
    if (u.model.state_dim != v.model.state_dim
            or u.model.obs_dim != v.model.obs_dim):
        raise ValueError("records have incompatible dimensions")
    rng = _pair_rng(u.record_id, v.record_id, seed)
    first, second = (u, v) if u.record_id <= v.record_id else (v, u)
    total = 0.0
    for rec in (first, second):
        perm = rng.permutation(rec.samples.count)
        inputs = np.hstack([rec.samples.x, rec.samples.y[perm]])
        moved_u = diffnet.forward(u.model.t_net, inputs)
        moved_v = diffnet.forward(v.model.t_net, inputs)
        total += 0.5 * np.mean(np.linalg.norm(moved_u - moved_v, axis=1))
    return float(total)


def record_distance(u: PretrainedRecord, v: PretrainedRecord, metric_kind: str,
                    seed: int = 0, use_joint: bool = False) -> float:
    """Distance between two records; w2/mmd use state samples only unless
    use_joint concatenates the observation coordinates."""
    if metric_kind == TDIST:
        return t_dist(u, v, seed)
    if use_joint:
        a = np.hstack([u.samples.x, u.samples.y])
        b = np.hstack([v.samples.x, v.samples.y])
    else:
        a, b = u.samples.x, v.samples.x
    if metric_kind == W2:
        rng = _pair_rng(u.record_id, v.record_id, seed)
        return w2_empirical(a, b, seed=int(rng.integers(2 ** 31)))
    if metric_kind == MMD:
        return mmd_rbf(a, b)
    raise ValueError(f"unknown metric kind {metric_kind!r}")


def distance_matrix(records, metric_kind: str, seed: int = 0,
                    use_joint: bool = False) -> DistanceMatrix:
    """All pairwise record distances, mirrored about a zero diagonal."""
    m = len(records)
    if m < 2:
        raise ValueError("need at least 2 records")
    entries = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            d = record_distance(records[i], records[j], metric_kind, seed, use_joint)
            entries[i, j] = entries[j, i] = d
    return DistanceMatrix(entries, metric_kind, seed)


# -- k-medoids ----------------------------------------------------------------

def _pam_build(d: np.ndarray, k: int) -> list[int]:
    """Greedy initialization: repeatedly add the point with the best cost drop."""
    m = d.shape[0]
    first = int(np.argmin(d.sum(axis=1)))
    medoids = [first]
    nearest = d[first].copy()
    while len(medoids) < k:
        gains = np.maximum(nearest[None, :] - d, 0.0).sum(axis=1)
        gains[medoids] = -np.inf
        best = int(np.argmax(gains))  # argmax takes the lowest index on ties
        medoids.append(best)
        nearest = np.minimum(nearest, d[best])
    return medoids


def _pam_swap(d: np.ndarray, medoids: list[int], max_iter: int) -> tuple[list[int], list[float]]:
    """Best-improvement swap descent; returns medoids and the cost trace."""
    m = d.shape[0]
    medoids = sorted(medoids)
    trace = []
    for _ in range(max_iter):
        med = np.asarray(medoids)
        dist_to_med = d[:, med]
        order = np.argsort(dist_to_med, axis=1, kind="stable")
        d1 = dist_to_med[np.arange(m), order[:, 0]]
        trace.append(float(d1.sum()))
        if len(medoids) == 1:
            d2 = np.full(m, np.inf)
        else:
            d2 = dist_to_med[np.arange(m), order[:, 1]]
        nearest_med = med[order[:, 0]]
        best_delta = 0.0
        best_swap = None
        non_medoids = [h for h in range(m) if h not in set(medoids)]
        for mi in medoids:
            affected = nearest_med == mi
            for h in non_medoids:
                dh = d[:, h]
                # points losing medoid mi move to min(second-nearest, h);
                # the rest switch only if h is strictly closer
                delta = np.where(affected, np.minimum(d2, dh) - d1,
                                 np.minimum(dh - d1, 0.0)).sum()
                if delta < best_delta - 1e-12:
                    best_delta = delta
                    best_swap = (mi, h)
        if best_swap is None:
            break
        medoids = sorted(set(medoids) - {best_swap[0]} | {best_swap[1]})
    return medoids, trace


def k_medoids(d: DistanceMatrix | np.ndarray, k: int, seed: int = 0,
              max_iter: int = 100) -> MedoidLibrary:
    """Partitioning around medoids: greedy build, then swap descent.

    Deterministic (the seed is accepted for interface symmetry but the build
    and lowest-index tie-breaking leave nothing random). The returned total
    cost never exceeds the build cost, and the swap trace is non-increasing.
    """
    if isinstance(d, DistanceMatrix):
        metric_kind = d.metric_kind
        entries = d.entries
    else:
        metric_kind = W2
        entries = np.asarray(d, dtype=float)
    m = entries.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must satisfy 1 <= k <= {m}")
    medoids = _pam_build(entries, k)
    medoids, _ = _pam_swap(entries, medoids, max_iter)
    med = np.asarray(medoids)
    assignment = np.argmin(entries[:, med], axis=1)
    total_cost = float(entries[np.arange(m), med[assignment]].sum())
    return MedoidLibrary(med, assignment, total_cost, metric_kind)


# -- persistence --------------------------------------------------------------

def distance_matrix_to_csv(d: DistanceMatrix, path) -> None:
    """One header line (metric_kind, M, seed), then the M x M entries."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([d.metric_kind, d.size, d.seed])
        for row in d.entries:
            writer.writerow([repr(float(v)) for v in row])


def distance_matrix_from_csv(path) -> DistanceMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        metric_kind, m, seed = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    entries = np.asarray(rows)
    if entries.shape != (int(m), int(m)):
        raise ValueError("matrix shape does not match its header")
    return DistanceMatrix(entries, metric_kind, int(seed))


def save_records(records, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        stem = directory / f"record_{rec.record_id:05d}"
        save_transport_model(rec.model, stem)
        joint_sample_to_csv(rec.samples, f"{stem}.samples.csv")
        with open(f"{stem}.record.yaml", "w") as fh:
            yaml.safe_dump({"record_id": rec.record_id, "sim_seed": rec.sim_seed,
                            "time_index": rec.time_index}, fh, sort_keys=True)


def load_records(directory) -> list[PretrainedRecord]:
    directory = Path(directory)
    records = []
    for meta_path in sorted(directory.glob("record_*.record.yaml")):
        with open(meta_path) as fh:
            meta = yaml.safe_load(fh)
        stem = str(meta_path)[:-len(".record.yaml")]
        records.append(PretrainedRecord(
            joint_sample_from_csv(stem + ".samples.csv"),
            load_transport_model(stem),
            meta["record_id"], meta["sim_seed"], meta["time_index"]))
    return records


def save_library(library: MedoidLibrary, directory, manifest_name: str = "library.yaml") -> None:
    """Manifest listing medoid record files plus the assignment array."""
    if library.medoids is None:
        raise ValueError("library has no attached records to persist")
    directory = Path(directory)
    save_records(library.medoids, directory)
    manifest = {
        "metric_kind": library.metric_kind,
        "k": library.k,
        "total_cost": float(library.total_cost),
        "medoid_indices": [int(i) for i in library.medoid_indices],
        "assignment": [int(i) for i in library.assignment],
        "medoid_records": [f"record_{rec.record_id:05d}" for rec in library.medoids],
    }
    with open(directory / manifest_name, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)


def load_library(directory, manifest_name: str = "library.yaml") -> MedoidLibrary:
    directory = Path(directory)
    with open(directory / manifest_name) as fh:
        manifest = yaml.safe_load(fh)
    medoids = []
    for stem in manifest["medoid_records"]:
        with open(directory / f"{stem}.record.yaml") as fh:
            meta = yaml.safe_load(fh)
        medoids.append(PretrainedRecord(
            joint_sample_from_csv(directory / f"{stem}.samples.csv"),
            load_transport_model(directory / stem),
            meta["record_id"], meta["sim_seed"], meta["time_index"]))
    return MedoidLibrary(np.asarray(manifest["medoid_indices"]),
                         np.asarray(manifest["assignment"]),
                         manifest["total_cost"], manifest["metric_kind"], medoids)
