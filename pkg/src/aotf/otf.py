"""Optimal transport filtering: map training and the per-step conditioning update.

The prior-to-posterior map is found by an adversarial two-network game over a
scalar potential f(x, y) and a map T(x, y). With samples (X_i, Y_i) from the
joint and a permutation sigma realizing the independence coupling, the
Monte-Carlo objective is

    J = mean_i f(X_i, Y_i)
      + mean_i [ 0.5*||X_i - T(X_i, Y_sigma_i)||^2 - f(T(X_i, Y_sigma_i), Y_sigma_i) ]

maximized over f and minimized over T (quadratic-cost Kantorovich dual). At
the saddle point, T(., y) pushes the X marginal to the conditional of X given
Y = y, which is exactly the Bayesian update a filter needs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import diffnet
from .baselines import FilterResult
from .diffnet import Mlp, SMOOTH_RELU, TANH
from .ensemble import JointSample, StateEnsemble
from .ssm import ModelSpec, propagate, sample_observations, sample_prior


class TrainingDivergenceError(RuntimeError):
    """Raised when the training objective stops being finite."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite objective {value!r} at outer iteration {iteration}")
        self.iteration = iteration


@dataclass
class OtfTrainConfig:
    """Hyperparameters of the alternating max-min optimization.

    Each outer iteration draws one minibatch and one fresh permutation, takes
    inner_t_steps_per_f_step descent steps on the map, then one ascent step on
    the potential. When a filter run warm-starts from the previous step's map,
    warm_outer_iterations replaces outer_iterations (default: 10x fewer).
    """

    outer_iterations: int = 2000
    inner_t_steps_per_f_step: int = 10
    batch_size: int = 128
    lr_f: float = 1e-3
    lr_t: float = 1e-3
    seed: int = 0
    warm_start: bool = True
    warm_outer_iterations: int | None = None
    hidden: tuple[int, ...] = (64, 64)
    f_activation: str = TANH
    t_activation: str = SMOOTH_RELU

    def __post_init__(self) -> None:
        if min(self.outer_iterations, self.inner_t_steps_per_f_step, self.batch_size) < 1:
            raise ValueError("iteration counts and batch size must be positive")
        if self.lr_f <= 0 or self.lr_t <= 0:
            raise ValueError("learning rates must be positive")

    def warm_iterations(self) -> int:
        if self.warm_outer_iterations is not None:
            return self.warm_outer_iterations
        return max(1, self.outer_iterations // 10)


@dataclass
class TransportMapModel:
    """Trained (potential, map) pair with training metadata."""

    f_net: Mlp
    t_net: Mlp
    state_dim: int
    obs_dim: int
    iterations: int = 0
    final_objective: float = float("nan")
    seed: int = 0

    def __post_init__(self) -> None:
        din = self.state_dim + self.obs_dim
        if self.t_net.in_dim != din or self.t_net.out_dim != self.state_dim:
            raise ValueError("map network dims must be (n+n_y) -> n")
        if self.f_net.in_dim != din or self.f_net.out_dim != 1:
            raise ValueError("potential network dims must be (n+n_y) -> 1")


def new_transport_model(state_dim: int, obs_dim: int, cfg: OtfTrainConfig) -> TransportMapModel:
    """Fresh model: the map carries a passthrough on its state slice, so it
    starts at the exact identity (zeroed final layer)."""
    din = state_dim + obs_dim
    f_net = diffnet.init_mlp((din, *cfg.hidden, 1), cfg.f_activation,
                             residual=False, seed=cfg.seed * 2 + 1)
    t_net = diffnet.init_mlp((din, *cfg.hidden, state_dim), cfg.t_activation,
                             residual=True, seed=cfg.seed * 2 + 2,
                             final_layer_scale=0.0)
    return TransportMapModel(f_net, t_net, state_dim, obs_dim, seed=cfg.seed)


def _copy_model(model: TransportMapModel) -> TransportMapModel:
    return TransportMapModel(
        replace(model.f_net, params=model.f_net.params.copy()),
        replace(model.t_net, params=model.t_net.params.copy()),
        model.state_dim, model.obs_dim, model.iterations,
        model.final_objective, model.seed)


def objective(model: TransportMapModel, batch: JointSample, permutation) -> float:
    """Monte-Carlo value of the max-min objective for one batch and coupling."""
    value, _, _ = objective_grads(model, batch, permutation)
    return value


def objective_grads(model: TransportMapModel, batch: JointSample,
                    permutation) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective value plus exact gradients wrt all potential and map parameters."""
    if batch.count < 1:
        raise ValueError("batch must be nonempty")
    x, y = batch.x, batch.y
    perm = np.asarray(permutation, dtype=int)
    y_ind = y[perm]
    b = x.shape[0]

    xin_t = np.hstack([x, y_ind])
    z, *t_cache = diffnet._forward_cached(model.t_net, xin_t)
    zin = np.hstack([z, y_ind])
    xin_f = np.hstack([x, y])

    f_joint, *joint_cache = diffnet._forward_cached(model.f_net, xin_f)
    f_push, *push_cache = diffnet._forward_cached(model.f_net, zin)
    quad = 0.5 * np.sum((x - z) ** 2, axis=1)
    value = float(np.mean(f_joint) + np.mean(quad - f_push[:, 0]))

    ones = np.full((b, 1), 1.0 / b)
    g_joint, _ = diffnet.backward(model.f_net, xin_f, ones, (f_joint, *joint_cache))
    g_push, dz_full = diffnet.backward(model.f_net, zin, ones, (f_push, *push_cache))
    grad_f = g_joint - g_push

    # dJ/dz = ((z - x)/b - d f/d z); the f input-gradient is already 1/b-scaled
    upstream_z = (z - x) / b - dz_full[:, :model.state_dim]
    grad_t, _ = diffnet.backward(model.t_net, xin_t, upstream_z, (z, *t_cache))
    return value, grad_f, grad_t


def train_otf(data: JointSample, cfg: OtfTrainConfig,
              init_model: TransportMapModel | None = None,
              outer_iterations: int | None = None) -> TransportMapModel:
    """Fit a transport map to joint samples by alternating stochastic max-min.

    Deterministic given cfg.seed. init_model warm-starts the parameters
    (copied, never mutated); outer_iterations overrides cfg for warm restarts.
    Raises TrainingDivergenceError if the objective leaves the finite range.
    """
    n_y = data.y.shape[1]
    n = data.x.shape[1]
    if data.count < cfg.batch_size:
        raise ValueError("data row count must be >= batch_size")
    outer = cfg.outer_iterations if outer_iterations is None else outer_iterations

    if init_model is None:
        model = new_transport_model(n, n_y, cfg)
    else:
        model = _copy_model(init_model)
    opt_f = diffnet.init_optimizer(model.f_net.params.size, cfg.lr_f)
    opt_t = diffnet.init_optimizer(model.t_net.params.size, cfg.lr_t)
    rng = np.random.default_rng(cfg.seed)

    for it in range(outer):
        idx = rng.choice(data.count, size=cfg.batch_size, replace=False)
        perm = rng.permutation(cfg.batch_size)
        x, y = data.x[idx], data.y[idx]
        y_ind = y[perm]
        xin_t = np.hstack([x, y_ind])
        b = cfg.batch_size

        for _ in range(cfg.inner_t_steps_per_f_step):
            z, *t_cache = diffnet._forward_cached(model.t_net, xin_t)
            zin = np.hstack([z, y_ind])
            _, dz_full = diffnet.backward(model.f_net, zin, np.full((b, 1), 1.0 / b))
            upstream_z = (z - x) / b - dz_full[:, :n]
            grad_t, _ = diffnet.backward(model.t_net, xin_t, upstream_z, (z, *t_cache))
            model.t_net.params, opt_t = diffnet.optimizer_step(opt_t, model.t_net.params, grad_t)

        value, grad_f, _ = objective_grads(model, JointSample(x, y), perm)
        if not np.isfinite(value):
            raise TrainingDivergenceError(it, value)
        # ascent on f
        model.f_net.params, opt_f = diffnet.optimizer_step(opt_f, model.f_net.params, -grad_f)

    eval_rows = min(data.count, 4096)
    eval_batch = JointSample(data.x[:eval_rows], data.y[:eval_rows])
    eval_perm = np.random.default_rng(cfg.seed + 1).permutation(eval_rows)
    model.iterations = outer
    model.final_objective = objective(model, eval_batch, eval_perm)
    model.seed = cfg.seed
    return model


def conditioning_step(model: TransportMapModel, prior: StateEnsemble,
                      y: np.ndarray) -> StateEnsemble:
    """Move every prior particle through the map at the realized observation."""
    y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
    if prior.dim != model.state_dim or y.shape[0] != model.obs_dim:
        raise ValueError("prior/observation dims do not match the model")
    tiled = np.broadcast_to(y, (prior.count, model.obs_dim))
    moved = diffnet.forward(model.t_net, np.hstack([prior.particles, tiled]))
    weights = None if prior.weights is None else prior.weights.copy()
    return StateEnsemble(moved, weights)


def otf_filter(spec: ModelSpec, observations: np.ndarray, n_particles: int,
               cfg: OtfTrainConfig, harvest: list | None = None) -> FilterResult:
    """Full filter loop training a fresh map at every step.

    Per step: propagate the ensemble, pair each particle with a synthetic
    observation, train the map on those pairs (warm-started from the previous
    step when cfg.warm_start), and apply it at the realized observation.
    When harvest is a list, (time_index, pairs, trained model) triples are
    appended, which is how map libraries are collected.
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if observations.shape[0] < 1:
        raise ValueError("observations must be nonempty")
    ensemble = sample_prior(spec, n_particles, cfg.seed)
    model: TransportMapModel | None = None
    posteriors: list[StateEnsemble] = []
    per_step_ms: list[float] = []

    for t, y in enumerate(observations, start=1):
        tic = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, t])
        ensemble = propagate(spec, ensemble, rng)
        paired_y = sample_observations(spec, ensemble.particles, rng)
        pairs = JointSample(ensemble.particles.copy(), paired_y)
        step_cfg = replace(cfg, seed=cfg.seed + t)
        try:
            if model is None or not cfg.warm_start:
                model = train_otf(pairs, step_cfg)
            else:
                model = train_otf(pairs, step_cfg, init_model=model,
                                  outer_iterations=cfg.warm_iterations())
        except TrainingDivergenceError as err:
            raise TrainingDivergenceError(err.iteration, float("nan")) from err
        ensemble = conditioning_step(model, ensemble, y)
        per_step_ms.append((time.perf_counter() - tic) * 1000.0)
        posteriors.append(ensemble)
        if harvest is not None:
            harvest.append((t, pairs, model))
    return FilterResult(posteriors, per_step_ms, "otf",
                        {"n_particles": n_particles, "seed": cfg.seed})


# -- persistence --------------------------------------------------------------

def save_transport_model(model: TransportMapModel, stem) -> None:
    """Writes <stem>.f.mlp, <stem>.t.mlp, and a <stem>.meta.yaml sidecar."""
    stem = str(stem)
    diffnet.save_mlp(model.f_net, stem + ".f.mlp")
    diffnet.save_mlp(model.t_net, stem + ".t.mlp")
    meta = {
        "format": 1,
        "state_dim": model.state_dim,
        "obs_dim": model.obs_dim,
        "iterations": model.iterations,
        "final_objective": float(model.final_objective),
        "seed": model.seed,
    }
    with open(stem + ".meta.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)


def load_transport_model(stem) -> TransportMapModel:
    stem = str(stem)
    with open(stem + ".meta.yaml") as fh:
        meta = yaml.safe_load(fh)
    return TransportMapModel(
        diffnet.load_mlp(stem + ".f.mlp"),
        diffnet.load_mlp(stem + ".t.mlp"),
        meta["state_dim"], meta["obs_dim"], meta["iterations"],
        meta["final_objective"], meta["seed"])
