"""Reference filters: stochastic ensemble Kalman update, sequential importance
resampling, and the large-N ground-truth oracle built on the latter."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ensemble import DegeneracyError, StateEnsemble, systematic_resample
from .ssm import (LINQUAD, ModelSpec, linquad_spec, log_likelihoods,
                  observation_noise_std, observation_mean, propagate,
                  sample_observations, sample_prior)

ENKF_RIDGE = 1e-9


@dataclass
class FilterResult:
    """One filter run: a posterior ensemble and a wall-clock reading per step."""

    posteriors: list[StateEnsemble]
    per_step_ms: list[float]
    method: str
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.posteriors) != len(self.per_step_ms):
            raise ValueError("posteriors and per_step_ms must have equal length")

    @property
    def steps(self) -> int:
        return len(self.posteriors)


def enkf_step(prior: StateEnsemble, y: np.ndarray, spec: ModelSpec,
              rng: np.random.Generator) -> StateEnsemble:
    """Perturbed-observation ensemble Kalman update with empirical statistics.

    Predicted observations are h(x_i) plus fresh observation noise; the gain
    is C_xy C_yy^{-1} with a small ridge on C_yy for invertibility under
    nearly singular (e.g. quadratic-observation) geometries.
    """
    if prior.count < 2:
        raise ValueError("EnKF needs at least 2 particles")
    y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
    x = prior.particles
    predicted = sample_observations(spec, x, rng)
    x_mean = x.mean(axis=0)
    p_mean = predicted.mean(axis=0)
    dx = x - x_mean
    dp = predicted - p_mean
    denom = prior.count - 1
    c_xy = dx.T @ dp / denom
    c_yy = dp.T @ dp / denom
    c_yy = c_yy + ENKF_RIDGE * np.trace(c_yy) * np.eye(c_yy.shape[0])
    gain = np.linalg.solve(c_yy.T, c_xy.T).T  # raises LinAlgError when singular
    updated = x + (y - predicted) @ gain.T
    return StateEnsemble(updated)


def sir_step(prior: StateEnsemble, y: np.ndarray, spec: ModelSpec,
             rng: np.random.Generator) -> StateEnsemble:
    """Importance-weight on the observation likelihood, then resample to uniform."""
    logw = log_likelihoods(spec, prior.particles, np.asarray(y, dtype=float))
    if prior.weights is not None:
        with np.errstate(divide="ignore"):
            logw = logw + np.log(prior.weights)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegeneracyError("all particle log-likelihoods are -inf")
    w = np.exp(logw - top)
    weighted = StateEnsemble(prior.particles, w / w.sum())
    return systematic_resample(weighted, rng)


def run_baseline_filter(spec: ModelSpec, observations: np.ndarray, n_particles: int,
                        method: str, seed: int) -> FilterResult:
    """Propagate-then-update loop for the enkf and sir reference methods."""
    if method not in ("enkf", "sir"):
        raise ValueError(f"unknown baseline method {method!r}")
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    ensemble = sample_prior(spec, n_particles, seed)
    posteriors: list[StateEnsemble] = []
    per_step_ms: list[float] = []
    for t, y in enumerate(observations, start=1):
        tic = time.perf_counter()
        rng = np.random.default_rng([seed, t])
        ensemble = propagate(spec, ensemble, rng)
        if method == "enkf":
            ensemble = enkf_step(ensemble, y, spec, rng)
        else:
            try:
                ensemble = sir_step(ensemble, y, spec, rng)
            except DegeneracyError as err:
                raise DegeneracyError(f"step {t}: {err}") from err
        per_step_ms.append((time.perf_counter() - tic) * 1000.0)
        posteriors.append(ensemble)
    return FilterResult(posteriors, per_step_ms, method,
                        {"n_particles": n_particles, "seed": seed})


def _block_spec(spec: ModelSpec, block: int) -> ModelSpec:
    p = spec.model_params
    return linquad_spec(1, spec.prior_mean[2 * block:2 * block + 2],
                        spec.prior_std, p.alpha, p.noise_std)


def ground_truth(spec: ModelSpec, observations: np.ndarray, n_truth: int,
                 seed: int) -> FilterResult:
    """Large-N SIR reference posterior.

    For the block-rotation quadratic model, the dynamics, observations, and
    prior all factor over 2-dim blocks, so one independent SIR runs per block
    and the block ensembles are concatenated. Every other model gets a single
    joint SIR. Degeneracy errors suggest raising n_truth.
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if spec.model_kind != LINQUAD or spec.model_params.half_blocks == 1:
        result = run_baseline_filter(spec, observations, n_truth, "sir", seed)
        return FilterResult(result.posteriors, result.per_step_ms, "truth",
                            {"n_particles": n_truth, "seed": seed})
    blocks = spec.model_params.half_blocks
    try:
        runs = [run_baseline_filter(_block_spec(spec, b),
                                    observations[:, 2 * b:2 * b + 2],
                                    n_truth, "sir", seed + b)
                for b in range(blocks)]
    except DegeneracyError as err:
        raise DegeneracyError(f"{err}; raise n_truth above {n_truth}") from err
    posteriors = []
    for t in range(observations.shape[0]):
        joined = np.hstack([runs[b].posteriors[t].particles for b in range(blocks)])
        posteriors.append(StateEnsemble(joined))
    per_step_ms = [sum(runs[b].per_step_ms[t] for b in range(blocks))
                   for t in range(observations.shape[0])]
    return FilterResult(posteriors, per_step_ms, "truth",
                        {"n_particles": n_truth, "seed": seed, "blocks": blocks})
