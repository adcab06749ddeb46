"""Minimal dense neural-network substrate.

Just enough machinery for the two small networks used by the Koopman
model: multi-layer perceptrons with manual forward/backward passes and a
from-scratch Adam optimizer. Everything is float64 numpy; inputs are
batch-first ``(batch, dim)`` with a 1-D convenience path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDivergedError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def _act_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class ForwardCache:
    """Per-layer records from a forward pass, consumed by ``backward``."""

    inputs: list        # layer inputs, inputs[l] is (B, in_l)
    preacts: list       # pre-activations, preacts[l] is (B, out_l)
    squeezed: bool      # True if the original input was 1-D


@dataclass
class Mlp:
    """Fully connected network; hidden layers share one activation, output is linear."""

    layer_dims: list
    weights: list = field(default_factory=list)    # weights[l] is (out_l, in_l)
    biases: list = field(default_factory=list)     # biases[l] is (out_l,)
    activation: str = "relu"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Evaluate the network.

        Returns the output and a cache sufficient for ``backward``. The
        activation is applied to every hidden layer and never to the
        output layer.
        """
        x = np.asarray(x, dtype=np.float64)
        squeezed = x.ndim == 1
        if squeezed:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"input has {x.shape[-1]} features, network expects {self.in_dim}"
            )
        inputs, preacts = [], []
        a = x
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            preacts.append(z)
            a = z if l == last else _act(self.activation, z)
        out = a[0] if squeezed else a
        return out, ForwardCache(inputs, preacts, squeezed)

    def backward(
        self, cache: ForwardCache, output_grad: np.ndarray
    ) -> tuple[list, list, np.ndarray]:
        """Reverse pass for a scalar loss with gradient ``output_grad`` at the output.

        Returns (weight grads, bias grads, input grad). The cache must come
        from a matching ``forward`` call on this network.
        """
        if len(cache.inputs) != self.n_layers:
            raise ValueError("cache does not match network depth")
        g = np.asarray(output_grad, dtype=np.float64)
        if cache.squeezed and g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.preacts[-1].shape:
            raise ValueError("output_grad shape does not match cached forward pass")
        w_grads = [None] * self.n_layers
        b_grads = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            if cache.inputs[l].shape[1] != self.weights[l].shape[1]:
                raise ValueError("cache does not match network shapes")
            w_grads[l] = g.T @ cache.inputs[l]
            b_grads[l] = g.sum(axis=0)
            g = g @ self.weights[l]
            if l > 0:
                g = g * _act_deriv(self.activation, cache.preacts[l - 1])
        dx = g[0] if cache.squeezed else g
        return w_grads, b_grads, dx

    def parameters(self) -> list:
        """Weights and biases in a fixed order (weights first, then biases)."""
        return list(self.weights) + list(self.biases)

    def set_parameters(self, params: list) -> None:
        n = self.n_layers
        if len(params) != 2 * n:
            raise ValueError("parameter list has wrong length")
        self.weights = [np.asarray(p, dtype=np.float64) for p in params[:n]]
        self.biases = [np.asarray(p, dtype=np.float64) for p in params[n:]]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def init_mlp(layer_dims, rng, activation: str = "relu") -> Mlp:
    """Create an Mlp with scaled-uniform weights and zero biases.

    Weights are drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    deterministic for a given seed or Generator.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer_dims needs at least an input and an output size")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims must be positive, got {dims}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases, activation)


@dataclass
class AdamState:
    """Adam moments plus hyperparameters for one parameter list."""

    first_moments: list
    second_moments: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: list, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moments=[np.zeros_like(p) for p in params],
        second_moments=[np.zeros_like(p) for p in params],
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: list, grads: list, state: AdamState) -> list:
    """One bias-corrected Adam update. Mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise ValueError("parameter, gradient, and state lists must align")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError("gradient shape does not match parameter shape")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient in Adam update")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params
