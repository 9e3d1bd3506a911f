"""Minimal dense networks with exact backprop and Adam, in float64 numpy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("identity", "non_negative")


class ShapeError(ValueError):
    """Input or parameter shape does not match the network layout."""


class StaleCacheError(RuntimeError):
    """Forward cache used after the network parameters changed."""


@dataclass
class Mlp:
    """Fully-connected net: weights[i] has shape (dims[i+1], dims[i]).

    The `non_negative` output transform squares the final pre-activation,
    so the output can reach exactly zero but never go below it.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_transform: str = "identity"
    version: int = 0

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...] (live arrays)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        """Install new parameter arrays; invalidates outstanding caches."""
        n_layers = len(self.weights)
        if len(params) != 2 * n_layers:
            raise ShapeError(f"expected {2 * n_layers} arrays, got {len(params)}")
        for i in range(n_layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeError(f"parameter shape mismatch at layer {i}")
            self.weights[i] = np.asarray(w, dtype=np.float64)
            self.biases[i] = np.asarray(b, dtype=np.float64)
        self.version += 1

    def copy(self) -> "Mlp":
        return Mlp(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_activation=self.hidden_activation,
            output_transform=self.output_transform,
        )


def mlp_init(
    layer_dims: list[int],
    rng: np.random.Generator,
    hidden_activation: str = "tanh",
    output_transform: str = "identity",
) -> Mlp:
    """New network with weights uniform in +-1/sqrt(fan_in), biases zero."""
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise ShapeError(f"bad layer dims {layer_dims}")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"unknown hidden activation {hidden_activation!r}")
    if output_transform not in OUTPUT_TRANSFORMS:
        raise ValueError(f"unknown output transform {output_transform!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(list(layer_dims), weights, biases, hidden_activation, output_transform)


@dataclass
class ForwardCache:
    version: int
    single: bool
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the net on one input (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with dim {net.input_dim}")

    layer_inputs, pre_activations = [], []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        layer_inputs.append(a)
        z = a @ w.T + b
        pre_activations.append(z)
        if i < last:
            a = np.tanh(z) if net.hidden_activation == "tanh" else np.maximum(z, 0.0)
    z_out = pre_activations[-1]
    y = z_out * z_out if net.output_transform == "non_negative" else z_out
    if single:
        y = y[0]
    return y, ForwardCache(net.version, single, layer_inputs, pre_activations)


def mlp_backward(
    net: Mlp, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of sum(output * output_grad) w.r.t. parameters and input.

    Returns (param_grads, input_grad) with param_grads ordered like
    Mlp.parameters(). The cache must come from a forward pass on the current
    parameters; a stale cache raises.
    """
    if cache.version != net.version:
        raise StaleCacheError("network parameters changed since forward pass")
    gy = np.asarray(output_grad, dtype=np.float64)
    if cache.single:
        gy = gy[None, :]
    z_out = cache.pre_activations[-1]
    gz = gy * 2.0 * z_out if net.output_transform == "non_negative" else gy.copy()

    param_grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        a = cache.layer_inputs[i]
        param_grads[2 * i] = gz.T @ a
        param_grads[2 * i + 1] = gz.sum(axis=0)
        ga = gz @ net.weights[i]
        if i > 0:
            z_prev = cache.pre_activations[i - 1]
            if net.hidden_activation == "tanh":
                t = np.tanh(z_prev)
                gz = ga * (1.0 - t * t)
            else:
                gz = ga * (z_prev > 0.0)
    input_grad = ga[0] if cache.single else ga
    return param_grads, input_grad


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one flat parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0 or eps <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1):
        raise ValueError("bad Adam hyperparameters")
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step_count=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; mutates the moments, returns new params."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params, state


def apply_gradients(net: Mlp, grads: list[np.ndarray], state: AdamState) -> None:
    """Adam-update the network in place (bumps its cache version)."""
    new_params, _ = adam_step(net.parameters(), grads, state)
    net.set_parameters(new_params)


def mlp_to_dict(net: Mlp) -> dict:
    """JSON-ready representation; weights stored row-major per layer."""
    return {
        "layer_dims": list(net.layer_dims),
        "hidden_activation": net.hidden_activation,
        "output_transform": net.output_transform,
        "weights": [w.flatten().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(data: dict) -> Mlp:
    dims = [int(d) for d in data["layer_dims"]]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.asarray(data["weights"][i], dtype=np.float64).reshape(fan_out, fan_in)
        b = np.asarray(data["biases"][i], dtype=np.float64)
        if b.shape != (fan_out,):
            raise ShapeError(f"bias length {b.shape} != {fan_out} at layer {i}")
        weights.append(w)
        biases.append(b)
    return Mlp(dims, weights, biases,
               str(data["hidden_activation"]), str(data["output_transform"]))


def save_mlp(net: Mlp, path, role: str | None = None) -> None:
    data = mlp_to_dict(net)
    if role is not None:
        data["role"] = role
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)


def load_mlp(path) -> tuple[Mlp, str | None]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return mlp_from_dict(data), data.get("role")
