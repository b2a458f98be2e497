"""Adam and (Nesterov) momentum updates over dicts of named arrays."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the update was not applied."""


@dataclass
class OptimizerState:
    kind: str  # "adam" | "momentum"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def adam(lr: float = 0.0006, **kw) -> OptimizerState:
    return OptimizerState("adam", lr, **kw)


def momentum(lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4,
             nesterov: bool = True) -> OptimizerState:
    return OptimizerState("momentum", lr, momentum=momentum, weight_decay=weight_decay, nesterov=nesterov)


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in slot(s) {sorted(bad)}")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def apply_update(state: OptimizerState, params: Mapping[str, np.ndarray],
                 grads: Mapping[str, np.ndarray], lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Return updated parameters and the advanced optimizer state.

    ``state`` is mutated in place (single owner) and also returned.  ``lr``
    overrides the state's learning rate for this step (schedules).
    """
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise KeyError(f"gradient slots do not match parameters (missing {missing}, extra {extra})")
    check_finite(grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    new = {}
    for k, p in params.items():
        g = grads[k]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.kind == "adam":
            m, v = state.moments.get(k) or (np.zeros_like(p), np.zeros_like(p))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.moments[k] = (m, v)
            mhat = m / (1.0 - state.beta1**t)
            vhat = v / (1.0 - state.beta2**t)
            new[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        elif state.kind == "momentum":
            (buf,) = state.moments.get(k) or (np.zeros_like(p),)
            buf = state.momentum * buf + g
            state.moments[k] = (buf,)
            step = g + state.momentum * buf if state.nesterov else buf
            new[k] = p - lr * step
        else:
            raise ValueError(f"unknown optimizer kind {state.kind!r}")
    return new, state
