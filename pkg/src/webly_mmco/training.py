"""Online WELL, online WELL with multimodal co-training, and batch WELL.

Training code only ever sees ``dataset.without_ground_truth()``; measuring
selection quality against ground truth happens in :mod:`webly_mmco.evaluation`
through the ``on_epoch_end`` callback.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import models
from .dataset import minibatch_iterator
from .mmco import consensus_losses, consensus_weights_batch, voting_scheme
from .models import AdamState, ClassifierParams, adam_step, backward, forward, sigmoid
from .selfpaced import (AgeSchedule, AgeState, advance_schedule, batch_weights,
                        default_queue_capacity, nearest_rank, regularizer_value)

log = logging.getLogger(__name__)

METRICS_SCHEMA = "webly-mmco/metrics/1"


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``voters`` restricts which trained modalities vote on the shared weights
    (default: all of ``train_modalities``). A modality outside ``voters`` is
    still trained with the shared weights; modality ablations use this to keep
    the test classifier fixed while changing the selection modalities.
    """

    batch_size: int = 64
    epochs: int = 40
    schedule: AgeSchedule = field(default_factory=AgeSchedule)
    voting: str = "max"
    train_modalities: tuple = ("concat",)
    test_modality: str = "concat"
    voters: Optional[tuple] = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    weight_decay: float = 0.0
    model_kinds: dict = field(default_factory=dict)
    hidden_units: int = 64
    selection: bool = True
    negatives_self_paced: bool = False
    batch_inner_epochs: int = 20
    batch_lr: Optional[float] = None
    batch_rounds: Optional[int] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_modalities", tuple(self.train_modalities))
        if self.voters is not None:
            object.__setattr__(self, "voters", tuple(self.voters))
        object.__setattr__(self, "voting", voting_scheme(self.voting))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", AgeSchedule(**self.schedule))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.train_modalities:
            raise ValueError("train_modalities must be nonempty")
        if len(set(self.train_modalities)) != len(self.train_modalities):
            raise ValueError(f"duplicate train modalities {self.train_modalities}")
        if self.test_modality not in self.train_modalities:
            raise ValueError(f"test modality {self.test_modality!r} must be one of the "
                             f"train modalities {self.train_modalities}")
        if self.voters is not None:
            if not self.voters:
                raise ValueError("voters must be nonempty")
            extra = set(self.voters) - set(self.train_modalities)
            if extra:
                raise ValueError(f"voters {sorted(extra)} are not train modalities")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        for kind in self.model_kinds.values():
            if kind not in (models.LINEAR, models.MLP):
                raise ValueError(f"unknown classifier kind {kind!r}")

    @property
    def voting_modalities(self) -> tuple:
        return self.voters if self.voters is not None else self.train_modalities

    def kind(self, modality: str) -> str:
        return self.model_kinds.get(modality, models.LINEAR)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_modalities"] = list(self.train_modalities)
        d["voters"] = None if self.voters is None else list(self.voters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = AgeSchedule(**d["schedule"])
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    p: float
    mean_loss: dict
    lambda_summary: dict
    loss_evals: int
    warmup: bool
    selection: Optional[dict] = None

    def to_record(self) -> dict:
        return {"schema": METRICS_SCHEMA, **asdict(self)}


@dataclass
class TrainerState:
    params: dict
    optim: dict
    age: AgeState
    config: TrainConfig
    class_names: tuple = ()
    epoch: int = 0
    reports: list = field(default_factory=list)

    @property
    def test_params(self) -> ClassifierParams:
        return self.params[self.config.test_modality]


def _modality_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) & 0xFFFFFFFFFFFFFFFF


def _require_labels(dataset, labels):
    labels = labels if labels is not None else dataset.labels
    if labels is None:
        raise ValueError("training needs pseudo labels (run the label step or pass labels)")
    if labels.shape != (dataset.n_samples, dataset.n_classes):
        raise ValueError(f"pseudo labels {labels.shape} do not match dataset "
                         f"{(dataset.n_samples, dataset.n_classes)}")
    return labels


def _check_modalities(dataset, cfg: TrainConfig) -> None:
    missing = [m for m in cfg.train_modalities if m not in dataset.modality_names]
    if missing:
        raise ValueError(f"unknown modalities {missing}; dataset has {dataset.modality_names}")
    if cfg.batch_size > dataset.n_samples:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {dataset.n_samples}")


def init_state(dataset, labels, cfg: TrainConfig) -> TrainerState:
    params, optim = {}, {}
    for name in cfg.train_modalities:
        dim = dataset.modality(name).dim
        params[name] = models.init_params(cfg.kind(name), dim, dataset.n_classes,
                                          cfg.hidden_units, _modality_seed(cfg.seed, name))
        optim[name] = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    capacity = cfg.schedule.queue_capacity
    if capacity is None:
        capacity = default_queue_capacity(float(labels.positive_counts().max(initial=0)))
    age = AgeState(dataset.n_classes, capacity, advance_schedule(cfg.schedule, 0))
    return TrainerState(params, optim, age, cfg, tuple(dataset.class_names))


def modality_scores(state: TrainerState, dataset, modalities=None, indices=None) -> np.ndarray:
    """(M, n, C) clamped class probabilities of each modality classifier."""
    modalities = modalities or state.config.voting_modalities
    out = []
    for m in modalities:
        X = dataset.features[m] if indices is None else dataset.features[m][indices]
        out.append(models.predict_proba(state.params[m], X))
    return np.stack(out)


def consensus_loss_matrix(state: TrainerState, dataset, labels) -> np.ndarray:
    """Consensus losses of every (sample, class) under the current models."""
    labels = _require_labels(dataset, labels)
    scores = modality_scores(state, dataset.without_ground_truth())
    return consensus_losses(scores, labels.labels, state.config.voting)


# --------------------------------------------------------------------------
# online training
# --------------------------------------------------------------------------

def _single_weights(state, probs, Y, cfg):
    """Closed-form self-paced weights on the sole modality's own losses."""
    (name,) = cfg.voting_modalities
    losses = models.binary_cross_entropy(probs[name], Y)
    return batch_weights(losses, Y, state.age, cfg.negatives_self_paced), losses


def _consensus_weights(state, probs, Y, cfg):
    scores = np.stack([probs[m] for m in cfg.voting_modalities])
    return consensus_weights_batch(scores, Y, state.age, cfg.voting, len(cfg.voting_modalities),
                                   cfg.negatives_self_paced)


def _single_losses(probs, Y, cfg):
    (name,) = cfg.voting_modalities
    return models.binary_cross_entropy(probs[name], Y)


def _consensus_only(probs, Y, cfg):
    return consensus_losses(np.stack([probs[m] for m in cfg.voting_modalities]), Y, cfg.voting)


def _run_online(dataset, labels, cfg: TrainConfig, weight_rule, loss_rule,
                on_batch=None, on_epoch_end=None, checkpoint_dir=None) -> TrainerState:
    _check_modalities(dataset, cfg)
    labels = _require_labels(dataset, labels)
    data = dataset.without_ground_truth()
    state = init_state(data, labels, cfg)
    Yall = labels.labels.astype(np.float64)
    V0all = labels.confidence
    pos_all = labels.labels == 1
    C = data.n_classes

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.age.p_current = advance_schedule(cfg.schedule, epoch)
        state.age.refresh()
        warmup = epoch < cfg.schedule.warmup_epochs
        loss_sum = {m: 0.0 for m in cfg.train_modalities}
        loss_evals = 0
        for idx in minibatch_iterator(data.n_samples, cfg.batch_size, cfg.seed, epoch):
            Y = Yall[idx]
            fwd, probs = {}, {}
            for m in cfg.train_modalities:
                z, cache = forward(state.params[m], data.features[m][idx])
                fwd[m] = (z, cache)
                probs[m] = np.clip(sigmoid(z), models.EPS, 1.0 - models.EPS)
                loss_sum[m] += float(models.binary_cross_entropy(probs[m], Y).sum())
                loss_evals += len(idx)
            if not cfg.selection:
                V, losses = np.ones_like(Y), loss_rule(probs, Y, cfg)
            elif warmup:
                V, losses = V0all[idx], loss_rule(probs, Y, cfg)
            else:
                V, losses = weight_rule(state, probs, Y, cfg)
            if on_batch is not None:
                on_batch({"epoch": epoch, "indices": idx, "weights": V, "losses": losses,
                          "warmup": warmup, "p": state.age.p_current})
            for m in cfg.train_modalities:
                z, cache = fwd[m]
                grad = backward(state.params[m], z, cache, Y, V)
                state.params[m], state.optim[m] = adam_step(state.params[m], grad, state.optim[m],
                                                            cfg.weight_decay)
            pos = pos_all[idx]
            for c in range(C):
                if pos[:, c].any():
                    state.age.push_losses(c, losses[pos[:, c], c])
                    state.age.compute_age(c)
        n_terms = data.n_samples * C
        report = EpochReport(
            epoch=epoch,
            p=state.age.p_current,
            mean_loss={m: loss_sum[m] / n_terms for m in cfg.train_modalities},
            lambda_summary=state.age.lambda_summary(),
            loss_evals=loss_evals,
            warmup=warmup,
        )
        state.reports.append(report)
        if on_epoch_end is not None:
            on_epoch_end(state, report)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}")
        log.debug("epoch %d p=%.2f loss=%s", epoch, report.p, report.mean_loss)
    state.epoch = cfg.epochs
    return state


def train_online_well(dataset, labels=None, cfg: TrainConfig = TrainConfig(), *,
                      on_batch=None, on_epoch_end=None, checkpoint_dir=None) -> TrainerState:
    """Single-modality online WELL: minibatch losses, closed-form weights from the queue age, then an Adam step."""
    if len(cfg.train_modalities) != 1:
        raise ValueError(f"online WELL trains exactly one modality, got {cfg.train_modalities}")
    return _run_online(dataset, labels, cfg, _single_weights, _single_losses,
                       on_batch, on_epoch_end, checkpoint_dir)


def train_mmco(dataset, labels=None, cfg: TrainConfig = TrainConfig(), *,
               on_batch=None, on_epoch_end=None, checkpoint_dir=None) -> TrainerState:
    """Online WELL with weights shared across modalities, computed from voted scores."""
    return _run_online(dataset, labels, cfg, _consensus_weights, _consensus_only,
                       on_batch, on_epoch_end, checkpoint_dir)


def train_fixed_weights(dataset, labels, cfg: TrainConfig, weights) -> dict:
    """Minibatch Adam on sum V * L with a fixed (N, C) weight matrix; same batch order as online WELL."""
    _check_modalities(dataset, cfg)
    labels = _require_labels(dataset, labels)
    data = dataset.without_ground_truth()
    state = init_state(data, labels, cfg)
    Y = labels.labels.astype(np.float64)
    W = np.asarray(weights, dtype=np.float64)
    if W.shape != Y.shape:
        raise ValueError(f"weights {W.shape} do not match labels {Y.shape}")
    params, optim = state.params, state.optim
    for epoch in range(cfg.epochs):
        for idx in minibatch_iterator(data.n_samples, cfg.batch_size, cfg.seed, epoch):
            for m in cfg.train_modalities:
                g = models.weighted_gradient(params[m], data.features[m][idx], Y[idx], W[idx])
                params[m], optim[m] = adam_step(params[m], g, optim[m], cfg.weight_decay)
    return params


def train_plain(dataset, labels=None, cfg: TrainConfig = TrainConfig()) -> dict:
    """Unweighted minibatch Adam; the reference for the selection-disabled degeneration."""
    labels = _require_labels(dataset, labels)
    return train_fixed_weights(dataset, labels, cfg, np.ones(labels.shape))


# --------------------------------------------------------------------------
# batch WELL
# --------------------------------------------------------------------------

def objective_value(X, Y, params: ClassifierParams, weights, lam) -> float:
    """sum V * L(y, g(x)) + sum (lam_c / 2) (V^2 - 2V); ``lam`` is a scalar or per-class vector."""
    V = np.asarray(weights, dtype=np.float64)
    if V.size and (V.min() < 0 or V.max() > 1):
        raise ValueError("weights must lie in [0, 1]")
    L = models.binary_cross_entropy(models.predict_proba(params, X), np.asarray(Y, dtype=np.float64))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), V.shape[-1:])
    return float(np.sum(V * L) + np.sum(regularizer_value(V, lam)))


def batch_rounds(schedule: AgeSchedule) -> int:
    """Alternation rounds: enough for p to reach its cap, plus two."""
    if schedule.p_step == 0:
        return 3
    steps = math.ceil(round((schedule.p_max - schedule.p_init) / schedule.p_step, 9))
    return steps + 1 + 2


@dataclass
class RoundReport:
    round: int
    p: float
    lambdas: list
    objective_before_w: float
    objective_after_w: float
    objective_before_v: float
    objective_after_v: float
    w_step_accepted: bool
    n_selected: int


def train_batch_well(dataset, labels=None, cfg: TrainConfig = TrainConfig(), *,
                     on_round=None) -> TrainerState:
    """Alternating-optimization WELL over the full dataset (single modality).

    Round r: fit the model with weights fixed (full-batch Adam, warm-started,
    ``batch_inner_epochs`` steps; the step is rejected if it raises the
    objective), compute every loss, set lambda_c to the nearest-rank
    100p-th percentile of the class's positive losses with
    ``p = advance_schedule(schedule, r * step_every_epochs)``, then re-solve
    the weights in closed form. Round 0 trains on the label confidences.
    """
    if len(cfg.train_modalities) != 1:
        raise ValueError(f"batch WELL trains exactly one modality, got {cfg.train_modalities}")
    _check_modalities(dataset, cfg)
    labels = _require_labels(dataset, labels)
    data = dataset.without_ground_truth()
    state = init_state(data, labels, cfg)
    (name,) = cfg.train_modalities
    X = data.features[name]
    Y = labels.labels.astype(np.float64)
    pos = labels.labels == 1
    lr = cfg.batch_lr if cfg.batch_lr is not None else cfg.lr
    state.optim[name] = replace(state.optim[name], lr=lr)
    V = labels.confidence.copy()
    lam = np.ones(data.n_classes)
    n_rounds = cfg.batch_rounds or batch_rounds(cfg.schedule)
    for r in range(n_rounds):
        p = advance_schedule(cfg.schedule, r * cfg.schedule.step_every_epochs)
        state.age.p_current = p
        before_w = objective_value(X, Y, state.params[name], V, lam)
        params, opt = state.params[name], state.optim[name]
        for _ in range(cfg.batch_inner_epochs):
            params, opt = adam_step(params, models.weighted_gradient(params, X, Y, V), opt,
                                    cfg.weight_decay)
        after_w = objective_value(X, Y, params, V, lam)
        accepted = after_w <= before_w
        if accepted:
            state.params[name], state.optim[name] = params, opt
        else:
            after_w = before_w
        losses = models.binary_cross_entropy(models.predict_proba(state.params[name], X), Y)
        for c in range(data.n_classes):
            lc = np.sort(losses[pos[:, c], c])
            if lc.size:
                lam[c] = max(nearest_rank(lc, p), np.finfo(np.float64).tiny)
        state.age.lambdas = lam.copy()
        before_v = objective_value(X, Y, state.params[name], V, lam)
        V = np.where(pos, np.where(losses < lam, 1.0 - losses / lam, 0.0), 1.0)
        after_v = objective_value(X, Y, state.params[name], V, lam)
        rep = RoundReport(r, p, lam.tolist(), before_w, after_w, before_v, after_v, accepted,
                          int((pos & (V > 0)).sum()))
        state.reports.append(rep)
        if on_round is not None:
            on_round(state, rep, V)
    state.epoch = n_rounds
    return state


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_checkpoint(state: TrainerState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, params in state.params.items():
        models.save_model(params, directory / f"model_{m}.npz", state.class_names, m)


def write_metrics_log(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rep in reports:
            rec = rep.to_record() if hasattr(rep, "to_record") else {"schema": METRICS_SCHEMA, **asdict(rep)}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
