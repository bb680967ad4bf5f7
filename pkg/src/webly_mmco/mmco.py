"""Consensus scores across modality classifiers and the shared MMCo sample weight."""
from __future__ import annotations

import numpy as np

from .models import EPS, binary_cross_entropy
from .selfpaced import AgeState, AgeStateError

SCHEMES = ("max", "average", "product")
_ALIASES = {"sum": "average", "mean": "average", "avg": "average", "prod": "product"}


def voting_scheme(name: str) -> str:
    s = _ALIASES.get(name.lower(), name.lower())
    if s not in SCHEMES:
        raise ValueError(f"unknown voting scheme {name!r}; choose from {SCHEMES}")
    return s


def vote_raw(scores, scheme: str) -> np.ndarray:
    """Unclamped vote over axis 0 of ``scores`` (modalities first)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        raise ValueError("vote needs at least one modality score")
    scheme = voting_scheme(scheme)
    if scheme == "max":
        return scores.max(axis=0)
    # the clips below only undo rounding, keeping product <= min <= average <= max exact
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    if scheme == "average":
        return np.clip(scores.mean(axis=0), lo, hi)
    # a direct product may underflow to 0; vote() clamps it back to EPS
    return np.minimum(np.prod(scores, axis=0), lo)


def vote(scores, scheme: str = "max"):
    """Consensus score h(g^1, ..., g^M), re-clamped to [EPS, 1 - EPS]."""
    out = np.clip(vote_raw(scores, scheme), EPS, 1.0 - EPS)
    return float(out) if out.ndim == 0 else out


def consensus_weight(scores, y: int, lam: float, scheme: str = "max") -> float:
    """max(0, 1 - L(vote(scores), y) / lam) for one sample and class."""
    if lam <= 0:
        raise ValueError(f"age lambda must be positive, got {lam}")
    loss = binary_cross_entropy(vote(scores, scheme), y)
    return max(0.0, 1.0 - loss / lam)


def consensus_losses(scores: np.ndarray, labels: np.ndarray, scheme: str) -> np.ndarray:
    """Cross-entropy of the voted score against the pseudo labels, shape (batch, C)."""
    return binary_cross_entropy(vote(scores, scheme), np.asarray(labels, dtype=np.float64))


def consensus_weights_batch(scores: np.ndarray, labels: np.ndarray, state: AgeState,
                            scheme: str = "max", n_modalities: int | None = None,
                            negatives_self_paced: bool = False) -> tuple:
    """Shared weights for a minibatch from (M, batch, C) per-modality scores.

    Returns ``(weights, losses)``; ``losses`` are the consensus losses, which
    the caller pushes to the age queue for positive-labeled entries.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 3:
        raise ValueError(f"scores must be (M, batch, C), got shape {scores.shape}")
    if n_modalities is not None and scores.shape[0] != n_modalities:
        raise ValueError(f"expected scores from {n_modalities} modalities, got {scores.shape[0]}")
    if scores.shape[1:] != labels.shape:
        raise ValueError(f"scores {scores.shape[1:]} and labels {labels.shape} disagree")
    losses = consensus_losses(scores, labels, scheme)
    pos = labels == 1
    cols = np.ones(labels.shape[1], bool) if negatives_self_paced else pos.any(axis=0)
    undefined = np.flatnonzero(cols & ~np.isfinite(state.lambdas))
    if undefined.size:
        raise AgeStateError(f"age undefined for classes {undefined.tolist()}; warm up first")
    lam = np.where(np.isfinite(state.lambdas), state.lambdas, 1.0)
    w = np.maximum(0.0, 1.0 - losses / lam)
    if not negatives_self_paced:
        w = np.where(pos, w, 1.0)
    return w, losses
