"""Minimal differentiable MLP engine: forward, reverse-mode gradients, Adam.

Networks are multilayer perceptrons over a single flat float64 parameter
vector. The activation applies between layers (the output layer is affine);
with the residual flag set, the leading output-size slice of the input is
added to the output, so a map whose trailing network is small stays close to
the identity in those coordinates.

A module-level counter tracks every gradient evaluation and optimizer step,
so callers can assert that inference-only code paths never train.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

SMOOTH_RELU = "smooth_relu"
TANH = "tanh"

_ACTIVATION_IDS = {SMOOTH_RELU: 0, TANH: 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_IDS.items()}

_MAGIC = b"MLPC0001"

_grad_evals = 0
_optimizer_steps = 0


def grad_eval_count() -> int:
    """Number of backward passes since the last reset (process-wide)."""
    return _grad_evals


def optimizer_step_count() -> int:
    return _optimizer_steps


def reset_instrumentation() -> None:
    global _grad_evals, _optimizer_steps
    _grad_evals = 0
    _optimizer_steps = 0


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == TANH:
        return np.tanh(z)
    return np.logaddexp(0.0, z)  # softplus, overflow-safe


def _activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    # sigmoid, the softplus derivative
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def param_count(layer_sizes) -> int:
    return sum((layer_sizes[i] + 1) * layer_sizes[i + 1]
               for i in range(len(layer_sizes) - 1))


@dataclass
class Mlp:
    layer_sizes: tuple[int, ...]
    params: np.ndarray
    activation: str = SMOOTH_RELU
    residual: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer_sizes needs >= 2 positive entries")
        if self.activation not in _ACTIVATION_IDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (param_count(self.layer_sizes),):
            raise ValueError("parameter vector length does not match layer_sizes")
        if self.residual and self.layer_sizes[-1] > self.layer_sizes[0]:
            raise ValueError("residual passthrough needs input dim >= output dim")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


def init_mlp(layer_sizes, activation: str = SMOOTH_RELU, residual: bool = False,
             seed: int = 0, final_layer_scale: float = 1.0) -> Mlp:
    """Uniform fan-in initialization: every weight and bias ~ U(-1/sqrt(fan_in), +).

    final_layer_scale multiplies the last layer's draw; 0 makes a residual net
    start as the exact identity on its leading coordinates.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        fan_in = layer_sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        block = rng.uniform(-bound, bound, size=(fan_in + 1) * layer_sizes[i + 1])
        if i == n_layers - 1:
            block *= final_layer_scale
        chunks.append(block)
    return Mlp(tuple(layer_sizes), np.concatenate(chunks), activation, residual, seed)


def _layer_views(net: Mlp):
    """(W, b) views into the flat parameter vector, one pair per layer."""
    views = []
    offset = 0
    for i in range(len(net.layer_sizes) - 1):
        din, dout = net.layer_sizes[i], net.layer_sizes[i + 1]
        w = net.params[offset:offset + din * dout].reshape(din, dout)
        offset += din * dout
        b = net.params[offset:offset + dout]
        offset += dout
        views.append((w, b))
    return views


def _forward_cached(net: Mlp, x: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for backward."""
    layers = _layer_views(net)
    a = x
    inputs, preacts = [], []
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        if i < len(layers) - 1:
            preacts.append(z)
            a = _activate(net.activation, z)
        else:
            a = z
    if net.residual:
        a = a + x[..., :net.out_dim]
    return a, inputs, preacts


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != network input dim {net.in_dim}")
    out, _, _ = _forward_cached(net, x)
    return out[0] if single else out


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray,
             cache=None) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of sum(upstream * net(x)).

    Returns (flat parameter gradient summed over the batch, input gradient per
    row). cache may carry a matching _forward_cached result to skip the
    recomputation.
    """
    global _grad_evals
    _grad_evals += 1
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        upstream = np.asarray(upstream, dtype=float)[None, :]
    else:
        upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (x.shape[0], net.out_dim):
        raise ValueError("upstream gradient shape must be (batch, out_dim)")
    if cache is None:
        _, inputs, preacts = _forward_cached(net, x)
    else:
        _, inputs, preacts = cache
    layers = _layer_views(net)
    param_grad = np.empty_like(net.params)
    offset = net.params.size
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        din, dout = w.shape
        if i < len(layers) - 1:
            delta = delta * _activate_grad(net.activation, preacts[i])
        b_grad = delta.sum(axis=0)
        w_grad = inputs[i].T @ delta
        offset -= dout
        param_grad[offset:offset + dout] = b_grad
        offset -= din * dout
        param_grad[offset:offset + din * dout] = w_grad.ravel()
        delta = delta @ w.T
    input_grad = delta
    if net.residual:
        input_grad = input_grad.copy()
        input_grad[:, :net.out_dim] += upstream
    if single:
        return param_grad, input_grad[0]
    return param_grad, input_grad


@dataclass
class OptimizerState:
    """Adam accumulators over a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def optimizer_step(state: OptimizerState, params: np.ndarray,
                   grads: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected adaptive-moment descent step; mutates the accumulators."""
    global _optimizer_steps
    _optimizer_steps += 1
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads, and optimizer state must have equal length")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state


def save_mlp(net: Mlp, path) -> None:
    """Versioned binary container; parameters as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(net.layer_sizes)))
        fh.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
        fh.write(struct.pack("<BB", _ACTIVATION_IDS[net.activation], int(net.residual)))
        fh.write(struct.pack("<q", net.seed))
        fh.write(struct.pack("<Q", net.params.size))
        fh.write(net.params.astype("<f8").tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a network container (bad magic {magic!r})")
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes))
        act_id, residual = struct.unpack("<BB", fh.read(2))
        (seed,) = struct.unpack("<q", fh.read(8))
        (n_params,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(8 * n_params), dtype="<f8").astype(float)
    return Mlp(sizes, params, _ACTIVATION_NAMES[act_id], bool(residual), seed)
