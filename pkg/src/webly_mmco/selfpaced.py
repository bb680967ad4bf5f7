"""Self-paced weights, the FIFO loss queue and the percentile-based age scheduler."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np


class AgeStateError(RuntimeError):
    """Raised when an age is requested before any loss has been observed."""


def regularizer_value(v, lam):
    """Linear self-paced regularizer (lam / 2) * (v**2 - 2 v)."""
    return 0.5 * lam * (np.square(v) - 2.0 * v)


def compute_sample_weight(loss, lam):
    """Closed-form minimizer over v in [0, 1] of v * loss + regularizer_value(v, lam).

    ``1 - loss/lam`` when ``loss < lam``, else 0. Works elementwise on arrays.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr <= 0):
        raise ValueError(f"age lambda must be positive, got {lam}")
    loss = np.asarray(loss, dtype=np.float64)
    w = np.where(loss < lam_arr, 1.0 - loss / lam_arr, 0.0)
    return float(w) if w.ndim == 0 else w


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    """Value at 1-based rank ceil(p * n) of an ascending array (rank clamped to [1, n])."""
    n = len(sorted_values)
    k = math.ceil(round(p * n, 9))
    return float(sorted_values[min(max(k, 1), n) - 1])


@dataclass(frozen=True)
class AgeSchedule:
    p_init: float = 0.3
    p_step: float = 0.05
    step_every_epochs: int = 5
    p_max: float = 0.6
    queue_capacity: Optional[int] = None  # None -> default_queue_capacity(expected positives)
    warmup_epochs: int = 1

    def __post_init__(self):
        if not 0 < self.p_init <= self.p_max <= 1:
            raise ValueError(f"need 0 < p_init <= p_max <= 1, got {self.p_init}, {self.p_max}")
        if self.p_step < 0:
            raise ValueError("p_step must be >= 0")
        if self.step_every_epochs < 1:
            raise ValueError("step_every_epochs must be >= 1")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


def advance_schedule(schedule: AgeSchedule, epoch: int) -> float:
    """Used-sample rate for ``epoch``: p_init raised by p_step every step_every_epochs, capped at p_max."""
    p = schedule.p_init + schedule.p_step * (int(epoch) // schedule.step_every_epochs)
    return round(min(schedule.p_max, p), 12)


def default_queue_capacity(positives_per_class_per_epoch: float) -> int:
    return int(min(65536, max(256, 4 * math.ceil(positives_per_class_per_epoch))))


class AgeState:
    """Per-class age lambda_c backed by a FIFO queue of recent positive-sample losses."""

    def __init__(self, n_classes: int, capacity: int, p: float):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.n_classes = n_classes
        self.capacity = capacity
        self.p_current = p
        self.queues = [deque(maxlen=capacity) for _ in range(n_classes)]
        self.lambdas = np.full(n_classes, np.nan)

    def push_losses(self, c: int, losses) -> "AgeState":
        self.queues[c].extend(float(x) for x in np.ravel(losses))
        return self

    def queue(self, c: int) -> list:
        return list(self.queues[c])

    def compute_age(self, c: int) -> float:
        """Nearest-rank 100p-th percentile of class c's queue; stored as lambda_c."""
        q = self.queues[c]
        if not q:
            raise AgeStateError(f"class {c}: loss queue is empty; run warmup before computing the age")
        lam = nearest_rank(np.sort(np.fromiter(q, dtype=np.float64, count=len(q))), self.p_current)
        # a zero-loss queue would give lambda = 0; keep the age positive
        self.lambdas[c] = max(lam, np.finfo(np.float64).tiny)
        return self.lambdas[c]

    def refresh(self) -> None:
        for c in range(self.n_classes):
            if self.queues[c]:
                self.compute_age(c)

    def lambda_summary(self) -> dict:
        lam = self.lambdas[np.isfinite(self.lambdas)]
        if lam.size == 0:
            return {"min": None, "median": None, "max": None}
        return {"min": float(lam.min()), "median": float(np.median(lam)), "max": float(lam.max())}


def push_losses(state: AgeState, c: int, losses) -> AgeState:
    return state.push_losses(c, losses)


def compute_age(state: AgeState, c: int) -> float:
    return state.compute_age(c)


def batch_weights(losses: np.ndarray, labels: np.ndarray, state: AgeState,
                  negatives_self_paced: bool = False) -> np.ndarray:
    """Self-paced weights for a (batch, C) loss matrix.

    Positive-labeled entries get ``compute_sample_weight(loss, lambda_c)``.
    Negative-labeled entries get 1 unless ``negatives_self_paced`` is set.
    """
    losses = np.asarray(losses, dtype=np.float64)
    pos = np.asarray(labels) == 1
    needs = pos.any(axis=0) if not negatives_self_paced else np.ones(losses.shape[1], bool)
    undefined = np.flatnonzero(needs & ~np.isfinite(state.lambdas))
    if undefined.size:
        raise AgeStateError(f"age undefined for classes {undefined.tolist()}; warm up first")
    lam = np.where(np.isfinite(state.lambdas), state.lambdas, 1.0)
    w = np.where(losses < lam, 1.0 - losses / lam, 0.0)
    if not negatives_self_paced:
        w = np.where(pos, w, 1.0)
    return w
