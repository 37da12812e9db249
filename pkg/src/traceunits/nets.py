"""Non-recurrent layers with hand-derived reverse-mode gradients.

These produce the per-step credit that the forward-mode traces turn into
recurrent parameter gradients; their own weights are trained by ordinary
backprop over the single step (there is no time dependence to unroll).
Forward calls accept a single vector or a (batch, dim) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import activation_apply, activation_deriv
from .errors import ShapeError


@dataclass
class MlpParams:
    """Affine layers with one activation name per layer."""

    weights: list[np.ndarray]   # each (out, in)
    biases: list[np.ndarray]    # each (out,)
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("layer lists must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: input dim {w.shape[1]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def as_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def load_dict(self, values: dict[str, np.ndarray], prefix: str = ""):
        for i in range(len(self.weights)):
            self.weights[i] = np.ascontiguousarray(values[f"{prefix}w{i}"], dtype=np.float64)
            self.biases[i] = np.ascontiguousarray(values[f"{prefix}b{i}"], dtype=np.float64)


def init_mlp(rng: np.random.Generator, sizes: list[int], activations: list[str]) -> MlpParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    if len(sizes) < 2 or len(activations) != len(sizes) - 1:
        raise ShapeError("need len(sizes) >= 2 and one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations saved by the exact forward pass."""

    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != expected {params.in_dim}")
    inputs, pres = [], []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        z = h @ w.T + b
        pres.append(z)
        h = activation_apply(act, z)
    return h, ForwardCache(inputs, pres)


def mlp_backward(params: MlpParams, cache: ForwardCache,
                 d_output: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Exact reverse pass for the cached forward.

    Returns gradients shaped like the parameters and the gradient w.r.t. the
    forward input (for a recurrent trunk below, its two halves are the
    per-component credit).
    """
    d = np.asarray(d_output, dtype=np.float64)
    if len(cache.inputs) != len(params.weights):
        raise ShapeError("cache does not match this network")
    if d.shape != cache.pre_activations[-1].shape:
        raise ShapeError(f"d_output shape {d.shape} != output shape "
                         f"{cache.pre_activations[-1].shape}")
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        dz = d * activation_deriv(params.activations[i], cache.pre_activations[i])
        x_in = cache.inputs[i]
        if dz.ndim == 1:
            grad_w[i] = np.outer(dz, x_in)
            grad_b[i] = dz.copy()
        else:
            grad_w[i] = dz.T @ x_in
            grad_b[i] = dz.sum(axis=0)
        d = dz @ params.weights[i]
    grads = MlpParams(grad_w, grad_b, list(params.activations))
    return grads, d
