"""Dense layers with hand-written reverse mode, gradient checking and SGD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight/bias shapes disagree")


@dataclass(frozen=True)
class Mlp:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError("adjacent layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
        return out

    def with_arrays(self, arrays: dict) -> "Mlp":
        return Mlp(tuple(
            Layer(arrays[f"{i}.weight"], arrays[f"{i}.bias"], layer.activation)
            for i, layer in enumerate(self.layers)
        ))


@dataclass
class GradTape:
    inputs: list  # input to each layer
    preacts: list  # affine output of each layer, before activation


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> Mlp:
    """ReLU hidden layers, linear output; ``out_scale`` shrinks the last layer's weights."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        W = glorot(rng, n_out, n_in) * (out_scale if last else 1.0)
        layers.append(Layer(W, np.zeros(n_out), "none" if last else "relu"))
    return Mlp(tuple(layers))


def forward_tape(mlp: Mlp, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != {mlp.in_dim}")
    tape = GradTape([], [])
    h = x
    for layer in mlp.layers:
        tape.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        tape.preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, tape


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    return forward_tape(mlp, x)[0]


def backward(mlp: Mlp, tape: GradTape, upstream: np.ndarray):
    """Returns ``(param_grads, input_grad)``; leading axes of the batch are summed."""
    grads = {}
    g = np.asarray(upstream, dtype=np.float64)
    for i in reversed(range(len(mlp.layers))):
        layer = mlp.layers[i]
        if layer.activation == "relu":
            g = g * (tape.preacts[i] > 0)
        h = tape.inputs[i]
        g2 = g.reshape(-1, g.shape[-1])
        grads[f"{i}.weight"] = g2.T @ h.reshape(-1, h.shape[-1])
        grads[f"{i}.bias"] = g2.sum(axis=0)
        g = g @ layer.weight
    return grads, g


# --- optimization ---------------------------------------------------------------


def step_decay(lr0: float, epoch: int, factor: float = 0.5, every: int = 10, floor: float = 1e-6) -> float:
    return max(lr0 * factor ** (epoch // every), floor)


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain gradient descent; returns a new parameter dict."""
    return {k: (v - lr * grads[k]) if k in grads else v for k, v in params.items()}


# --- finite differences ------------------------------------------------------------


def central_difference(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5):
    """Central difference of ``f`` w.r.t. ``x[index]``, perturbing ``x`` in place.

    Also returns the disagreement of the one-sided differences, which is large
    when the probe straddles a kink (ReLU, L1, max, clamp, bin edge).
    """
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    f0 = f()
    return (fp - fm) / (2 * h), abs((fp - f0) - (f0 - fm)) / h


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
