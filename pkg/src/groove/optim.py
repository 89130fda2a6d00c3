"""Functional SGD and Adam over dicts of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def _check_aligned(params, grads):
    if params.keys() != grads.keys():
        raise ShapeError(f"param/grad keys differ: {sorted(params)} vs {sorted(grads)}")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(f"{k}: param {np.shape(params[k])} vs grad {np.shape(grads[k])}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """Descent step ``p - lr * g``; returns new arrays."""
    _check_aligned(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, hyper: AdamConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    _check_aligned(params, grads)
    if not state.m:
        state = AdamState.zeros_like(params)
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
