"""AdamW with global-norm gradient clipping over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], clip_norm: float):
    """Scale all gradients so their joint L2 norm is at most clip_norm.

    Returns (clipped gradients, pre-clip norm).
    """
    norm = global_norm(grads)
    if clip_norm > 0.0 and norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamWState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float = 2e-4,
    weight_decay: float = 0.01,
    clip_norm: float = 1.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Gradients are clipped by global norm first. Raises
    NonFiniteGradientError (leaving params untouched) on NaN/inf input.
    Returns the pre-clip gradient norm.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must share the same keys")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")

    grads, norm = clip_by_global_norm(grads, clip_norm)
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[name] -= lr * (update + weight_decay * params[name])
    return norm
