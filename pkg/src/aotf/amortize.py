"""Amortized filtering: offline map-library construction and the online
similarity-weighted filter that replaces per-step training.

Offline, full transport-map filter runs on randomized simulations of the model
are harvested into a library of (samples, map) records, which a medoid
clustering condenses to K representatives. Online, each step computes
distances between the current prior cloud and the medoid priors, softmax-
weights the medoid maps by exp(-lambda * distance), and applies the weighted
map combination; no gradient work happens online.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .baselines import FilterResult
from .ensemble import JointSample, StateEnsemble
from .metricspace import (MMD, W2, MedoidLibrary, PretrainedRecord,
                          distance_matrix, k_medoids, mmd_rbf, w2_empirical)
from .otf import OtfTrainConfig, TransportMapModel, otf_filter
from .ssm import ModelSpec, propagate, sample_observations, sample_prior, simulate

WEIGHT_TOL = 1e-10


@dataclass
class AmortizeConfig:
    """Library size/clustering knobs plus the online weighting rule.

    lam is the softmax sharpness: 0 gives uniform weights, math.inf picks the
    nearest medoid. The online metric must be computable from state samples
    alone, so the transported-particle distance is rejected there. Offline
    harvesting jitters the prior of each simulation: the mean shifts by
    U(-mu0_jitter, +mu0_jitter) and the std draws from sigma0_range
    (default (sigma0/2, 2*sigma0)).
    """

    m_records: int = 100
    k_clusters: int = 5
    lam: float = 1.0
    offline_metric: str = W2
    online_metric: str = W2
    n_offline: int = 1000
    n_online: int = 250
    seed: int = 0
    steps_per_sim: int = 50
    mu0_jitter: float = 2.0
    sigma0_range: tuple[float, float] | None = None
    online_subsample: int = 512
    max_swap_iter: int = 100

    def __post_init__(self) -> None:
        if self.m_records < 1 or not 1 <= self.k_clusters <= self.m_records:
            raise ValueError("need 1 <= k_clusters <= m_records")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative (math.inf allowed)")
        if self.online_metric not in (W2, MMD):
            raise ValueError("online metric must be computable from state "
                             "samples alone (w2 or mmd)")
        if min(self.n_offline, self.n_online, self.steps_per_sim) < 1:
            raise ValueError("particle counts and steps_per_sim must be positive")


def build_library(spec: ModelSpec, cfg: AmortizeConfig,
                  otf_cfg: OtfTrainConfig) -> list[PretrainedRecord]:
    """Harvest m_records (samples, trained map) records from filter runs.

    Each simulation draws a jittered prior, simulates steps_per_sim
    observations, and runs the per-step-training filter over them, keeping
    every step's joint samples and trained map until the library is full.
    Deterministic given cfg.seed; training failures abort with the offending
    simulation and step identified.
    """
    rng = np.random.default_rng([cfg.seed, 101])
    records: list[PretrainedRecord] = []
    sim = 0
    lo, hi = cfg.sigma0_range or (spec.prior_std / 2.0, 2.0 * spec.prior_std)
    while len(records) < cfg.m_records:
        shift = rng.uniform(-cfg.mu0_jitter, cfg.mu0_jitter)
        sigma0 = rng.uniform(lo, hi)
        sim_seed = int(rng.integers(2 ** 31))
        sim_spec = replace(spec, prior_mean=spec.prior_mean + shift,
                           prior_std=sigma0)
        steps = min(cfg.steps_per_sim, cfg.m_records - len(records))
        traj = simulate(sim_spec, steps, sim_seed)
        harvest: list = []
        try:
            otf_filter(sim_spec, traj.observations, cfg.n_offline,
                       replace(otf_cfg, seed=sim_seed), harvest=harvest)
        except Exception as err:
            raise RuntimeError(
                f"library build failed in simulation {sim} (seed {sim_seed}) "
                f"after {len(harvest)} steps: {err}") from err
        for t, pairs, model in harvest:
            records.append(PretrainedRecord(pairs, model, len(records),
                                            sim_seed=sim_seed, time_index=t))
        sim += 1
    return records


def offline_stage(records, cfg: AmortizeConfig) -> MedoidLibrary:
    """Distance matrix plus medoid clustering over a full record list."""
    if len(records) != cfg.m_records:
        raise ValueError("record count does not match cfg.m_records")
    d = distance_matrix(records, cfg.offline_metric, cfg.seed)
    library = k_medoids(d, cfg.k_clusters, cfg.seed, cfg.max_swap_iter)
    return library.attach_records(records)


def _medoid_cloud(medoids: MedoidLibrary, k: int, cfg: AmortizeConfig) -> np.ndarray:
    cloud = medoids.medoids[k].samples.x
    cap = min(cfg.n_online, cfg.online_subsample)
    if cloud.shape[0] <= cap:
        return cloud
    rng = np.random.default_rng([cfg.seed, 71, k])
    return cloud[rng.choice(cloud.shape[0], size=cap, replace=False)]


def online_weights(medoids: MedoidLibrary, prior_x: np.ndarray,
                   cfg: AmortizeConfig) -> np.ndarray:
    """Softmax weights exp(-lam * rho(medoid, prior)) over the K medoids.

    Distances use state samples only; the medoid clouds are subsampled to
    min(n_online, online_subsample) points. lam=0 returns uniform weights and
    lam=inf a one-hot at the closest medoid (lowest index on ties). The
    exponentials are max-subtracted, so large lam*distance cannot underflow
    to an all-zero vector.
    """
    prior_x = np.atleast_2d(np.asarray(prior_x, dtype=float))
    if prior_x.shape[0] < 1:
        raise ValueError("prior cloud must be nonempty")
    if medoids.medoids is None:
        raise ValueError("library has no attached records")
    k = medoids.k
    dists = np.empty(k)
    for i in range(k):
        ref = _medoid_cloud(medoids, i, cfg)
        if cfg.online_metric == W2:
            dists[i] = w2_empirical(ref, prior_x, seed=cfg.seed)
        else:
            dists[i] = mmd_rbf(ref, prior_x)
    return weights_from_distances(dists, cfg.lam)


def weights_from_distances(distances: np.ndarray, lam: float) -> np.ndarray:
    """The weighting rule alone, exposed for direct testing on raw distances."""
    distances = np.asarray(distances, dtype=float)
    k = distances.shape[0]
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return np.full(k, 1.0 / k)
    if math.isinf(lam):
        w = np.zeros(k)
        w[int(np.argmin(distances))] = 1.0
        return w
    scores = -lam * distances
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def apply_amortized_map(medoids: MedoidLibrary, weights: np.ndarray,
                        prior: StateEnsemble, y: np.ndarray) -> StateEnsemble:
    """Per particle, the weighted sum of the medoid maps at observation y."""
    weights = np.asarray(weights, dtype=float)
    if medoids.medoids is None:
        raise ValueError("library has no attached records")
    if weights.shape != (medoids.k,):
        raise ValueError("weights length must equal the medoid count")
    from . import diffnet  # local import keeps the module graph acyclic

    model0 = medoids.medoids[0].model
    y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
    if prior.dim != model0.state_dim or y.shape[0] != model0.obs_dim:
        raise ValueError("prior/observation dims do not match the library maps")
    tiled = np.broadcast_to(y, (prior.count, model0.obs_dim))
    inputs = np.hstack([prior.particles, tiled])
    out = np.zeros_like(prior.particles)
    for w, rec in zip(weights, medoids.medoids):
        if w == 0.0:
            continue
        out += w * diffnet.forward(rec.model.t_net, inputs)
    keep = None if prior.weights is None else prior.weights.copy()
    return StateEnsemble(out, keep)


def aotf_filter(spec: ModelSpec, observations: np.ndarray,
                medoids: MedoidLibrary,
                cfg: AmortizeConfig) -> tuple[FilterResult, np.ndarray]:
    """Online amortized filter: no training, only weighting and map evaluation.

    Per step: propagate, pair each particle with a synthetic observation (the
    step's record), weight the medoids by state-cloud similarity, and apply
    the combined map at the realized observation. Returns the filter result
    and the (steps x K) weight history.
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if medoids.medoids is None or medoids.k < 1:
        raise ValueError("medoid library must be nonempty with attached records")
    ensemble = sample_prior(spec, cfg.n_online, cfg.seed)
    posteriors: list[StateEnsemble] = []
    per_step_ms: list[float] = []
    weight_rows = np.empty((observations.shape[0], medoids.k))
    for t, y in enumerate(observations, start=1):
        tic = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, t])
        ensemble = propagate(spec, ensemble, rng)
        sample_observations(spec, ensemble.particles, rng)  # the record's paired draws
        w = online_weights(medoids, ensemble.particles, cfg)
        ensemble = apply_amortized_map(medoids, w, ensemble, y)
        per_step_ms.append((time.perf_counter() - tic) * 1000.0)
        posteriors.append(ensemble)
        weight_rows[t - 1] = w
    result = FilterResult(posteriors, per_step_ms, "aotf",
                          {"n_particles": cfg.n_online, "seed": cfg.seed,
                           "k": medoids.k, "lam": cfg.lam,
                           "online_metric": cfg.online_metric})
    return result, weight_rows
