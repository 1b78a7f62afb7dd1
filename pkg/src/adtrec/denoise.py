"""Cross-entropy, truncated CE and reweighted CE example weights.

Both denoising losses are expressed as per-example weights on the plain CE
loss: truncation zeroes the largest-loss positives of a batch, reweighting
scales each example by its own predicted confidence raised to ``beta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import clip_prob

STRATEGIES = ("CE", "T-CE", "R-CE")


@dataclass(frozen=True)
class DropRateSchedule:
    """Linear drop-rate ramp ``min(alpha * T, epsilon_max)``."""

    alpha: float
    epsilon_max: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 <= self.epsilon_max < 1:
            raise ValueError(f"epsilon_max must lie in [0, 1), got {self.epsilon_max}")

    @classmethod
    def from_epsilon_n(cls, epsilon_max: float, epsilon_n: float) -> "DropRateSchedule":
        """Schedule reaching ``epsilon_max`` after ``epsilon_n`` iterations."""
        if epsilon_max == 0:
            return cls(1.0 / max(epsilon_n, 1), 0.0)
        return cls(epsilon_max / epsilon_n, epsilon_max)

    @property
    def epsilon_n(self) -> float:
        return self.epsilon_max / self.alpha

    def __call__(self, T) -> float:
        return drop_rate(T, self)


@dataclass(frozen=True)
class ReweightConfig:
    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


def ce_loss(y_hat, y_bar):
    """Binary cross-entropy on clipped probabilities."""
    p = clip_prob(np.asarray(y_hat, float))
    y = np.asarray(y_bar, float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def drop_rate(T, schedule: DropRateSchedule) -> float:
    if T < 0:
        raise ValueError(f"iteration must be non-negative, got {T}")
    return min(schedule.alpha * T, schedule.epsilon_max)


def select_truncated(pos_losses, total_batch_size: int, epsilon: float) -> np.ndarray:
    """Indices of the ``floor(epsilon * total_batch_size)`` largest positive losses.

    The count is taken against the whole batch (positives and negatives) but
    only positives can be dropped, so it is clamped at ``len(pos_losses)``.
    Equal losses are dropped lowest index first. Returned indices are sorted.
    """
    pos_losses = np.asarray(pos_losses, float)
    if total_batch_size < len(pos_losses):
        raise ValueError("total batch size is smaller than the number of positives")
    k = min(math.floor(epsilon * total_batch_size), len(pos_losses))
    if k <= 0:
        return np.empty(0, np.int64)
    order = np.argsort(-pos_losses, kind="stable")
    return np.sort(order[:k])


def rce_weight(y_hat, y_bar, beta: float):
    """``y_hat**beta`` for positives and ``(1 - y_hat)**beta`` for negatives."""
    p = clip_prob(np.asarray(y_hat, float))
    y = np.asarray(y_bar)
    return np.where(y == 1, p**beta, (1.0 - p) ** beta)


def batch_weights(
    strategy: str,
    y_hat,
    y_bar,
    T: int = 0,
    schedule: DropRateSchedule | None = None,
    beta: float | None = None,
) -> np.ndarray:
    """Per-example weights turning a weighted CE sum into CE, T-CE or R-CE."""
    y_hat = np.asarray(y_hat, float)
    y_bar = np.asarray(y_bar)
    if strategy == "CE":
        return np.ones(len(y_hat))
    if strategy == "T-CE":
        if schedule is None:
            raise ValueError("T-CE needs a drop-rate schedule")
        weights = np.ones(len(y_hat))
        pos = np.flatnonzero(y_bar == 1)
        dropped = select_truncated(ce_loss(y_hat[pos], 1), len(y_hat), drop_rate(T, schedule))
        weights[pos[dropped]] = 0.0
        return weights
    if strategy == "R-CE":
        if beta is None:
            raise ValueError("R-CE needs beta")
        ReweightConfig(beta)
        return rce_weight(y_hat, y_bar, beta)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
