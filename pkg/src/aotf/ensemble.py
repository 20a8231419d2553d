"""Particle-ensemble containers and the resampling/pairing utilities shared by all filters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

WEIGHT_SUM_TOL = 1e-10


class DegeneracyError(RuntimeError):
    """Raised when particle weights carry no usable information (e.g. all zero)."""


@dataclass
class StateEnsemble:
    """N particles in R^n with optional importance weights (uniform when None).

    Value-semantic: operations return new ensembles instead of mutating.
    """

    particles: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.particles.ndim != 2 or self.particles.shape[0] < 1:
            raise ValueError("particles must be a nonempty N x n array")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.particles.shape[0],):
                raise ValueError("weights must have one entry per particle")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
                raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL}")
            self.weights = w

    @property
    def count(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def effective_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.count, 1.0 / self.count)
        return self.weights


@dataclass
class JointSample:
    """Row-aligned state/observation pairs: y[i] is drawn conditionally on x[i]."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y must have equal row counts")

    @property
    def count(self) -> int:
        return self.x.shape[0]


def empirical_mean(e: StateEnsemble) -> np.ndarray:
    """Weighted mean of the particle cloud."""
    return e.effective_weights() @ e.particles


def empirical_std(e: StateEnsemble) -> np.ndarray:
    """Weighted per-coordinate standard deviation (population convention)."""
    mean = empirical_mean(e)
    var = e.effective_weights() @ (e.particles - mean) ** 2
    return np.sqrt(var)


def systematic_resample(e: StateEnsemble, rng: np.random.Generator) -> StateEnsemble:
    """Low-variance systematic resampling to N equally-weighted particles.

    Particle i is copied between floor(N*w_i) and ceil(N*w_i) times; a single
    uniform offset positions all N strata.
    """
    w = e.effective_weights()
    total = w.sum()
    if total <= 0:
        raise DegeneracyError("cannot resample: all weights are zero")
    w = w / total
    n = e.count
    positions = (np.arange(n) + rng.uniform()) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0  # guard against round-off at the top
    idx = np.searchsorted(cumulative, positions, side="right")
    return StateEnsemble(e.particles[idx].copy())


def shuffle_pairing(j: JointSample, seed: int) -> JointSample:
    """Break the row pairing with a uniform random permutation of the y rows.

    The x rows and both marginal multisets are unchanged; only the coupling is
    randomized. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(j.count)
    return JointSample(j.x.copy(), j.y[perm].copy())


def standardize(cloud: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift/scale each coordinate to mean 0, std 1 (population convention).

    Constant coordinates map to 0 with the reported std clamped to 1, so
    un-standardizing with the returned (mean, std) always reconstructs the
    input. Requires at least two rows.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if cloud.shape[0] < 2:
        raise ValueError("standardize requires at least 2 rows")
    mean = cloud.mean(axis=0)
    std = cloud.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return (cloud - mean) / std, mean, std


def _format_float(x: float) -> str:
    return repr(float(x))


def ensemble_to_csv(e: StateEnsemble, path) -> None:
    """One particle per row; a trailing weight column only when non-uniform."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"x_{i + 1}" for i in range(e.dim)]
        if e.weights is not None:
            header.append("weight")
        writer.writerow(header)
        for i in range(e.count):
            row = [_format_float(v) for v in e.particles[i]]
            if e.weights is not None:
                row.append(_format_float(e.weights[i]))
            writer.writerow(row)


def ensemble_from_csv(path) -> StateEnsemble:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_weights = header and header[-1] == "weight"
        rows = [list(map(float, row)) for row in reader]
    data = np.asarray(rows, dtype=float)
    if has_weights:
        return StateEnsemble(data[:, :-1], data[:, -1])
    return StateEnsemble(data)


def joint_sample_to_csv(j: JointSample, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n, m = j.x.shape[1], j.y.shape[1]
        writer.writerow([f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(m)])
        for i in range(j.count):
            writer.writerow([_format_float(v) for v in j.x[i]] + [_format_float(v) for v in j.y[i]])


def joint_sample_from_csv(path) -> JointSample:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for name in header if name.startswith("x_"))
        rows = [list(map(float, row)) for row in reader]
    data = np.asarray(rows, dtype=float)
    return JointSample(data[:, :n], data[:, n:])
