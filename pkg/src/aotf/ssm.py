"""Stochastic state-space models and synthetic-data generation.

Three model families:
  * lorenz63  -- chaotic 3-state drift discretized by Euler-Maruyama, scalar
                 observation of the third coordinate.
  * linquad   -- block-rotation linear dynamics with elementwise-quadratic
                 observations (sign-ambiguous, hence bimodal posteriors).
  * lingauss  -- scalar-gain linear dynamics with identity observations; the
                 analytically tractable reference model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .ensemble import StateEnsemble

LORENZ63 = "lorenz63"
LINQUAD = "linquad"
LINGAUSS = "lingauss"

MODEL_KINDS = (LORENZ63, LINQUAD, LINGAUSS)


@dataclass(frozen=True)
class Lorenz63Params:
    """Drift coefficients, step size, and noise levels for the chaotic model.

    process_std=None resolves to sqrt(10*dt); the propagation step adds
    process_std*sqrt(dt)*xi per coordinate, so 0 recovers the deterministic
    dynamics.
    """

    sigma_l: float = 10.0
    rho_l: float = 28.0
    beta_l: float = 8.0 / 3.0
    dt: float = 0.01
    process_std: float | None = None
    obs_std: float = math.sqrt(10.0)

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.obs_std <= 0:
            raise ValueError("obs_std must be positive")
        if self.process_std is None:
            object.__setattr__(self, "process_std", math.sqrt(10.0 * self.dt))
        if self.process_std < 0:
            raise ValueError("process_std must be nonnegative")


@dataclass(frozen=True)
class LinQuadParams:
    """Rotation-block dynamics x' = A x + sigma*xi with y = x*x + sigma*xi.

    A is block-diagonal with half_blocks copies of the 2x2 rotation
    [[alpha, sqrt(1-alpha^2)], [-sqrt(1-alpha^2), alpha]]; state and
    observation dimension are both 2*half_blocks.
    """

    half_blocks: int = 1
    alpha: float = 0.9
    noise_std: float = 0.1

    def __post_init__(self) -> None:
        if self.half_blocks < 1:
            raise ValueError("half_blocks must be a positive integer")
        if abs(self.alpha) > 1:
            raise ValueError("alpha must satisfy |alpha| <= 1")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        block = rotation_block(self.alpha)
        if np.max(np.abs(block.T @ block - np.eye(2))) > 1e-12:
            raise ValueError("rotation block failed the orthogonality check")


@dataclass(frozen=True)
class LinGaussParams:
    """x' = a*x + process_std*xi with identity observations y = x + obs_std*xi."""

    a: float = 0.9
    process_std: float = 0.5
    obs_std: float = 0.5

    def __post_init__(self) -> None:
        if self.process_std < 0:
            raise ValueError("process_std must be nonnegative")
        if self.obs_std <= 0:
            raise ValueError("obs_std must be positive")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A fully specified filtering problem: dynamics, observation model, prior."""

    model_kind: str
    state_dim: int
    obs_dim: int
    prior_mean: np.ndarray
    prior_std: float
    model_params: Lorenz63Params | LinQuadParams | LinGaussParams

    def __post_init__(self) -> None:
        object.__setattr__(self, "prior_mean", np.asarray(self.prior_mean, dtype=float))
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.prior_std < 0:
            raise ValueError("prior_std must be nonnegative")
        if self.prior_mean.shape != (self.state_dim,):
            raise ValueError("prior_mean length must equal state_dim")
        if self.model_kind == LORENZ63 and (self.state_dim, self.obs_dim) != (3, 1):
            raise ValueError("lorenz63 requires state_dim=3, obs_dim=1")
        if self.model_kind == LINQUAD:
            expected = 2 * self.model_params.half_blocks
            if self.state_dim != expected or self.obs_dim != expected:
                raise ValueError("linquad requires state_dim = obs_dim = 2*half_blocks")
        if self.model_kind == LINGAUSS and self.state_dim != self.obs_dim:
            raise ValueError("lingauss requires obs_dim = state_dim")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A simulated run: states X_0..X_T and observations Y_1..Y_T."""

    states: np.ndarray
    observations: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        if self.states.shape[0] != self.observations.shape[0] + 1:
            raise ValueError("states must have exactly one more row than observations")


def lorenz63_spec(prior_mean=(0.0, 0.0, 0.0), prior_std: float = math.sqrt(10.0),
                  **params) -> ModelSpec:
    return ModelSpec(LORENZ63, 3, 1, np.asarray(prior_mean, dtype=float), prior_std,
                     Lorenz63Params(**params))


def linquad_spec(half_blocks: int = 1, prior_mean=0.0, prior_std: float = 1.0,
                 alpha: float = 0.9, noise_std: float = 0.1) -> ModelSpec:
    dim = 2 * half_blocks
    mean = np.asarray(prior_mean, dtype=float)
    if mean.ndim == 0:
        mean = np.full(dim, float(mean))
    return ModelSpec(LINQUAD, dim, dim, mean, prior_std,
                     LinQuadParams(half_blocks, alpha, noise_std))


def lingauss_spec(dim: int = 1, prior_mean=0.0, prior_std: float = 1.0,
                  a: float = 0.9, process_std: float = 0.5,
                  obs_std: float = 0.5) -> ModelSpec:
    mean = np.asarray(prior_mean, dtype=float)
    if mean.ndim == 0:
        mean = np.full(dim, float(mean))
    return ModelSpec(LINGAUSS, dim, dim, mean, prior_std,
                     LinGaussParams(a, process_std, obs_std))


def rotation_block(alpha: float) -> np.ndarray:
    s = math.sqrt(max(0.0, 1.0 - alpha * alpha))
    return np.array([[alpha, s], [-s, alpha]])


def transition_matrix(params: LinQuadParams) -> np.ndarray:
    block = rotation_block(params.alpha)
    a = np.zeros((2 * params.half_blocks, 2 * params.half_blocks))
    for b in range(params.half_blocks):
        a[2 * b:2 * b + 2, 2 * b:2 * b + 2] = block
    return a


def lorenz63_drift(params: Lorenz63Params, states: np.ndarray) -> np.ndarray:
    x1, x2, x3 = states[..., 0], states[..., 1], states[..., 2]
    return np.stack([params.sigma_l * (x2 - x1),
                     x1 * (params.rho_l - x3) - x2,
                     x1 * x2 - params.beta_l * x3], axis=-1)


def sample_prior(spec: ModelSpec, count: int, seed: int) -> StateEnsemble:
    """Draw count i.i.d. particles from N(prior_mean, prior_std^2 I)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    draws = spec.prior_mean + spec.prior_std * rng.standard_normal((count, spec.state_dim))
    return StateEnsemble(draws)


def _propagate_states(spec: ModelSpec, states: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    p = spec.model_params
    if spec.model_kind == LORENZ63:
        noise = p.process_std * math.sqrt(p.dt) * rng.standard_normal(states.shape)
        return states + p.dt * lorenz63_drift(p, states) + noise
    if spec.model_kind == LINQUAD:
        a = transition_matrix(p)
        return states @ a.T + p.noise_std * rng.standard_normal(states.shape)
    return p.a * states + p.process_std * rng.standard_normal(states.shape)


def propagate(spec: ModelSpec, ensemble: StateEnsemble,
              rng: np.random.Generator) -> StateEnsemble:
    """Push every particle one step through the dynamic model (weights kept)."""
    if ensemble.dim != spec.state_dim:
        raise ValueError("ensemble dimension does not match the model spec")
    moved = _propagate_states(spec, ensemble.particles, rng)
    weights = None if ensemble.weights is None else ensemble.weights.copy()
    return StateEnsemble(moved, weights)


def observation_mean(spec: ModelSpec, states: np.ndarray) -> np.ndarray:
    """Noise-free observation h(x), vectorized over leading axes."""
    states = np.asarray(states, dtype=float)
    if states.shape[-1] != spec.state_dim:
        raise ValueError("state dimension does not match the model spec")
    if spec.model_kind == LORENZ63:
        return states[..., 2:3]
    if spec.model_kind == LINQUAD:
        return states * states
    return states.copy()


def observation_noise_std(spec: ModelSpec) -> float:
    if spec.model_kind == LORENZ63:
        return spec.model_params.obs_std
    if spec.model_kind == LINQUAD:
        return spec.model_params.noise_std
    return spec.model_params.obs_std


def sample_observations(spec: ModelSpec, states: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw one observation per state row."""
    mean = observation_mean(spec, states)
    return mean + observation_noise_std(spec) * rng.standard_normal(mean.shape)


def sample_observation(spec: ModelSpec, state: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    return sample_observations(spec, np.asarray(state, dtype=float), rng)


def log_likelihoods(spec: ModelSpec, states: np.ndarray,
                    observation: np.ndarray) -> np.ndarray:
    """Gaussian observation log-density at each state row, vectorized."""
    observation = np.asarray(observation, dtype=float)
    residual = observation - observation_mean(spec, states)
    std = observation_noise_std(spec)
    n_y = spec.obs_dim
    return (-0.5 * n_y * math.log(2.0 * math.pi * std * std)
            - np.sum(residual * residual, axis=-1) / (2.0 * std * std))


def log_likelihood(spec: ModelSpec, state: np.ndarray,
                   observation: np.ndarray) -> float:
    return float(log_likelihoods(spec, np.asarray(state, dtype=float), observation))


def simulate(spec: ModelSpec, steps: int, seed: int) -> Trajectory:
    """Simulate X_0..X_steps and Y_1..Y_steps; a pure function of (spec, steps, seed)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    state = spec.prior_mean + spec.prior_std * rng.standard_normal(spec.state_dim)
    states = np.empty((steps + 1, spec.state_dim))
    observations = np.empty((steps, spec.obs_dim))
    states[0] = state
    for t in range(1, steps + 1):
        state = _propagate_states(spec, state, rng)
        states[t] = state
        observations[t - 1] = sample_observations(spec, state, rng)
    return Trajectory(states, observations, seed)


# -- serialization ----------------------------------------------------------

def spec_to_dict(spec: ModelSpec) -> dict:
    """Flat config block: kind, dims, prior, and kind-specific parameters."""
    out = {
        "kind": spec.model_kind,
        "state_dim": spec.state_dim,
        "obs_dim": spec.obs_dim,
        "prior_mean": [float(v) for v in spec.prior_mean],
        "prior_std": float(spec.prior_std),
    }
    p = spec.model_params
    if spec.model_kind == LORENZ63:
        out.update(sigma_l=p.sigma_l, rho_l=p.rho_l, beta_l=p.beta_l, dt=p.dt,
                   process_std=p.process_std, obs_std=p.obs_std)
    elif spec.model_kind == LINQUAD:
        out.update(alpha=p.alpha, noise_std=p.noise_std)
    else:
        out.update(a=p.a, process_std=p.process_std, obs_std=p.obs_std)
    return out


def spec_from_dict(block: dict) -> ModelSpec:
    block = dict(block)
    kind = block.pop("kind")
    prior_mean = block.pop("prior_mean", 0.0)
    prior_std = float(block.pop("prior_std", 1.0))
    block.pop("state_dim", None)
    obs_dim = block.pop("obs_dim", None)
    if kind == LORENZ63:
        return lorenz63_spec(prior_mean, prior_std, **block)
    if kind == LINQUAD:
        half_blocks = block.pop("half_blocks", None)
        if half_blocks is None:
            mean = np.atleast_1d(np.asarray(prior_mean, dtype=float))
            half_blocks = (len(mean) // 2) if mean.ndim and len(mean) > 1 else 1
        return linquad_spec(half_blocks, prior_mean, prior_std, **block)
    if kind == LINGAUSS:
        mean = np.atleast_1d(np.asarray(prior_mean, dtype=float))
        dim = obs_dim or (len(mean) if len(mean) > 1 else block.pop("dim", 1))
        block.pop("dim", None)
        return lingauss_spec(dim, prior_mean, prior_std, **block)
    raise ValueError(f"unknown model kind {kind!r}")


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Columns t, x_1..x_n, y_1..y_m; the t=0 row has empty observation cells."""
    n = traj.states.shape[1]
    m = traj.observations.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(n)]
                        + [f"y_{i + 1}" for i in range(m)])
        writer.writerow([0] + [repr(float(v)) for v in traj.states[0]] + [""] * m)
        for t in range(1, traj.states.shape[0]):
            writer.writerow([t] + [repr(float(v)) for v in traj.states[t]]
                            + [repr(float(v)) for v in traj.observations[t - 1]])


def trajectory_from_csv(path, seed: int = 0) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for name in header if name.startswith("x_"))
        states, observations = [], []
        for row in reader:
            states.append([float(v) for v in row[1:1 + n]])
            obs = row[1 + n:]
            if any(cell != "" for cell in obs):
                observations.append([float(v) for v in obs])
    return Trajectory(np.asarray(states), np.asarray(observations), seed)
