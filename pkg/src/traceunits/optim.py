"""Adam with bias correction and global-norm gradient clipping.

Parameters and gradients travel as flat dicts of float64 arrays keyed by
name; every training loop in the package shares this one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericsError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _reject_non_finite(grads: dict[str, np.ndarray]):
    # one fused scalar check; only name offenders on the failure path
    total = 0.0
    for g in grads.values():
        total += kernels.array_probe_sum(g)
    if not np.isfinite(total):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericsError(f"non-finite gradient for parameters: {', '.join(sorted(bad))}")


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], *,
              inplace: bool = False) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Rejects non-finite gradients with a diagnostic
    naming the offending arrays; moments and the step counter advance only
    on accepted updates. With ``inplace`` the parameter arrays are mutated
    and returned, which the per-step training loops rely on.
    """
    _reject_non_finite(grads)
    for k in grads:
        if k not in params:
            raise ShapeError(f"gradient for unknown parameter {k!r}")
        if grads[k].shape != params[k].shape:
            raise ShapeError(f"gradient shape {grads[k].shape} != parameter shape "
                             f"{params[k].shape} for {k!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            state.m[k] = m
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        if inplace:
            kernels.adam_array_step(p, np.ascontiguousarray(g), m, v,
                                    state.lr, state.beta1, state.beta2,
                                    state.eps, bc1, bc2)
            new_params[k] = p
        else:
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            new_params[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new_params, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients by min(1, max_norm / ||g||_2)."""
    if max_norm <= 0.0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return {k: g.copy() for k, g in grads.items()}
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
