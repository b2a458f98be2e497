"""Reward shaping, the moving-average baseline and the REINFORCE estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import controller
from .arch import SearchSpace

DEFAULT_DECAY = 0.95
DEFAULT_CLIP = 5.0


@dataclass(frozen=True)
class RewardRecord:
    raw: float  # validation accuracy in [0, 1] or validation perplexity
    reward: float
    baseline: float | None = None  # value subtracted when this reward was consumed
    trajectory_id: int | None = None
    replica_id: int | None = None


@dataclass(frozen=True)
class BaselineState:
    value: float = 0.0
    decay: float = DEFAULT_DECAY
    count: int = 0


def shape_reward_accuracy(val_acc_history: Sequence[float]) -> float:
    """Cube of the best validation accuracy over the last five epochs."""
    hist = list(val_acc_history)
    if not hist:
        raise ValueError("accuracy history is empty")
    if any(not 0.0 <= a <= 1.0 for a in hist):
        raise ValueError("accuracies must lie in [0, 1]")
    return max(hist[-5:]) ** 3


def shape_reward_perplexity(ppl: float, c: float = 80.0) -> float:
    if not ppl > 0:
        raise ValueError(f"perplexity must be positive, got {ppl}")
    return c / ppl**2


def update_baseline(state: BaselineState, reward: float) -> BaselineState:
    if state.count == 0:
        return BaselineState(float(reward), state.decay, 1)
    value = state.decay * state.value + (1.0 - state.decay) * reward
    return BaselineState(value, state.decay, state.count + 1)


def policy_gradient(params: Mapping[str, np.ndarray], space: SearchSpace,
                    trajectories: Sequence[controller.Trajectory], rewards: Sequence[float],
                    baseline: float) -> dict[str, np.ndarray]:
    """Ascent direction ``mean_k (R_k - b) * grad log P(trajectory_k)``."""
    m = len(trajectories)
    if m < 1 or len(rewards) != m:
        raise ValueError("need one reward per trajectory and at least one trajectory")
    weights = (np.asarray(rewards, dtype=float) - baseline) / m
    _, grads = controller.log_prob(params, space, trajectories, weights)
    return grads


def descent_direction(grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Negate an ascent direction for minimizing optimizers."""
    return {k: -g for k, g in grads.items()}
