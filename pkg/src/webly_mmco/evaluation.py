"""Selection quality, ranking metrics, easiness analysis, noise sweep, ablation, retrieval.

This is the only module that reads ground truth or generator provenance.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import models
from .dataset import CONCAT, MultimodalDataset, SynthConfig, synth_generate, with_concat
from .selfpaced import advance_schedule
from .training import (TrainConfig, TrainerState, consensus_loss_matrix, train_fixed_weights,
                       train_mmco, train_online_well)

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """A metric was requested on an input for which it is undefined."""


# --------------------------------------------------------------------------
# ranking metrics
# --------------------------------------------------------------------------

def rank_order(scores) -> np.ndarray:
    """Indices by descending score, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def average_precision(scores, relevance) -> float:
    """Mean over relevant items of the precision at their rank."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if scores.shape != rel.shape:
        raise ValueError(f"scores {scores.shape} and relevance {rel.shape} differ in shape")
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise UndefinedMetricError("average precision needs at least one relevant item")
    ranked = rel[rank_order(scores)]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    # fsum: the sum is correctly rounded and independent of summation order
    return math.fsum((hits[ranked] / ranks).tolist()) / n_rel


def precision_at_k(scores, truth, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > scores.size:
        raise ValueError(f"k={k} exceeds list length {scores.size}")
    top = rank_order(scores)[:k]
    return float(np.asarray(truth)[top].astype(bool).mean())


def mean_average_precision(scores, truth) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    aps = [average_precision(scores[:, c], truth[:, c])
           for c in range(scores.shape[1]) if truth[:, c].any()]
    if not aps:
        raise UndefinedMetricError("no class has a positive sample")
    return float(np.mean(aps))


def mean_precision_at_k(scores, truth, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.mean([precision_at_k(scores[:, c], truth[:, c], k)
                          for c in range(scores.shape[1])]))


# --------------------------------------------------------------------------
# example-selection quality
# --------------------------------------------------------------------------

@dataclass
class SelectionReport:
    per_class: list
    precision: float
    recall: float
    ap: float
    n_selected: int
    n_tp_selected: int
    n_fp_selected: int
    empty_selection_classes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "ap": self.ap,
                "n_selected": self.n_selected, "n_tp_selected": self.n_tp_selected,
                "n_fp_selected": self.n_fp_selected,
                "empty_selection_classes": list(self.empty_selection_classes)}


def selection_metrics(losses, lambdas, pseudo_labels, ground_truth) -> SelectionReport:
    """Quality of the positive-labeled samples whose loss is below the class age.

    Precision of an empty selection is reported as 1.0 and the class is listed
    in ``empty_selection_classes``. AP ranks positive-labeled samples by
    ascending loss; classes whose positives contain no true positive are left
    out of the AP average.
    """
    losses = np.asarray(losses, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    pos = np.asarray(pseudo_labels) == 1
    gt = np.asarray(ground_truth).astype(bool)
    if not pos.any():
        raise UndefinedMetricError("no positive-labeled samples")
    per_class, empty = [], []
    for c in range(losses.shape[1]):
        idx = np.flatnonzero(pos[:, c])
        if idx.size == 0:
            continue
        sel = losses[idx, c] < lambdas[c]
        truth = gt[idx, c]
        n_sel, n_tp_sel, n_tp = int(sel.sum()), int((sel & truth).sum()), int(truth.sum())
        if n_sel == 0:
            empty.append(c)
        per_class.append({
            "class": c,
            "n_positive_labeled": int(idx.size),
            "n_true_positive": n_tp,
            "n_selected": n_sel,
            "n_tp_selected": n_tp_sel,
            "n_fp_selected": n_sel - n_tp_sel,
            "precision": n_tp_sel / n_sel if n_sel else 1.0,
            "recall": n_tp_sel / n_tp if n_tp else 0.0,
            "ap": average_precision(-losses[idx, c], truth) if n_tp else None,
        })
    aps = [r["ap"] for r in per_class if r["ap"] is not None]
    with_tp = [r for r in per_class if r["n_true_positive"]]
    return SelectionReport(
        per_class=per_class,
        precision=float(np.mean([r["precision"] for r in per_class])),
        recall=float(np.mean([r["recall"] for r in with_tp])) if with_tp else 0.0,
        ap=float(np.mean(aps)) if aps else 0.0,
        n_selected=sum(r["n_selected"] for r in per_class),
        n_tp_selected=sum(r["n_tp_selected"] for r in per_class),
        n_fp_selected=sum(r["n_fp_selected"] for r in per_class),
        empty_selection_classes=empty,
    )


class SelectionTracker:
    """``on_epoch_end`` callback recording selection quality against ground truth.

    Stores, per tracked epoch, the selection report plus the consensus loss
    matrix and ages it was computed from.
    """

    def __init__(self, dataset: MultimodalDataset, labels=None, epochs=None):
        if dataset.ground_truth is None:
            raise ValueError("selection tracking needs ground truth")
        self.dataset = dataset
        self.labels = labels if labels is not None else dataset.labels
        self.epochs = None if epochs is None else set(epochs)
        self.snapshots = {}

    def __call__(self, state: TrainerState, report) -> None:
        if self.epochs is not None and report.epoch not in self.epochs:
            return
        losses = consensus_loss_matrix(state, self.dataset, self.labels)
        lam = state.age.lambdas.copy()
        sel = selection_metrics(losses, lam, self.labels.labels, self.dataset.ground_truth)
        self.snapshots[report.epoch] = {"report": sel, "losses": losses, "lambdas": lam,
                                        "p": report.p}
        report.selection = sel.summary()


def first_cap_epoch(cfg: TrainConfig) -> int:
    """First epoch at which p reaches p_max (last epoch if it never does)."""
    for e in range(cfg.epochs):
        if advance_schedule(cfg.schedule, e) >= cfg.schedule.p_max:
            return e
    return cfg.epochs - 1


# --------------------------------------------------------------------------
# test-set metrics and retrieval
# --------------------------------------------------------------------------

def test_scores(params: models.ClassifierParams, test: MultimodalDataset, modality: str = CONCAT):
    return models.predict_proba(params, test.features[modality])


def test_metrics(params, test: MultimodalDataset, modality: str = CONCAT) -> dict:
    if test.ground_truth is None:
        raise ValueError("test metrics need ground truth")
    s = test_scores(params, test, modality)
    out = {"map": mean_average_precision(s, test.ground_truth)}
    for k in (10, 100):
        if k <= test.n_samples:
            out[f"prec@{k}"] = mean_precision_at_k(s, test.ground_truth, k)
    return out


def top_k_retrieval(params, test: MultimodalDataset, c: int, k: int, modality: str = CONCAT) -> list:
    """(sample index, score) pairs of the k highest-scoring test samples for class c."""
    if k > test.n_samples:
        raise ValueError(f"k={k} exceeds test size {test.n_samples}")
    s = test_scores(params, test, modality)[:, c]
    return [(int(i), float(s[i])) for i in rank_order(s)[:k]]


# --------------------------------------------------------------------------
# easiness analysis
# --------------------------------------------------------------------------

def easiness_scores(dataset: MultimodalDataset, labels=None, cfg: TrainConfig = TrainConfig(),
                    top_fraction: float = 0.3, epochs: Optional[int] = None) -> np.ndarray:
    """Score positive-labeled samples with a classifier trained on the most confident positives.

    Per class, the top ``ceil(top_fraction * positives)`` positive-labeled
    samples by label confidence (ties by index) plus all negative-labeled
    samples train an auxiliary classifier of the test modality's kind. Returns
    an (N, C) array with scores at positive-labeled entries and NaN elsewhere.
    """
    labels = labels if labels is not None else dataset.labels
    pos = labels.labels == 1
    V = np.where(pos, 0.0, 1.0)
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(pos[:, c])
        if idx.size == 0:
            log.warning("class %s has no positive-labeled samples; skipped", dataset.class_names[c])
            continue
        k = math.ceil(round(top_fraction * idx.size, 9))
        if k < 1:
            log.warning("class %s has no top-%.0f%% sample; skipped", dataset.class_names[c],
                        100 * top_fraction)
            continue
        order = idx[np.lexsort((idx, -labels.confidence[idx, c]))]
        V[order[:k], c] = 1.0
    aux_cfg = replace(cfg, train_modalities=(cfg.test_modality,), voters=None,
                      epochs=epochs if epochs is not None else cfg.epochs)
    params = train_fixed_weights(dataset, labels, aux_cfg, V)[cfg.test_modality]
    s = models.predict_proba(params, dataset.features[cfg.test_modality])
    return np.where(pos, s, np.nan)


def auxiliary_training_sizes(labels, top_fraction: float = 0.3) -> list:
    return [math.ceil(round(top_fraction * int(n), 9)) for n in labels.positive_counts()]


BUCKETS = ("easy", "normal", "hard")


def easiness_buckets(easiness: np.ndarray, pseudo_labels) -> dict:
    """Per class, positive-labeled indices split 30/40/30 by descending easiness (ties by index)."""
    pos = np.asarray(pseudo_labels) == 1
    out = {}
    for c in range(easiness.shape[1]):
        idx = np.flatnonzero(pos[:, c])
        order = idx[np.lexsort((idx, -easiness[idx, c]))]
        n = order.size
        n_easy = math.floor(0.3 * n + 0.5)
        n_hard = math.floor(0.3 * n + 0.5)
        out[c] = {"easy": order[:n_easy], "normal": order[n_easy:n - n_hard],
                  "hard": order[n - n_hard:]}
    return out


@dataclass
class EasinessReport:
    buckets: dict  # bucket -> {"map", "recall", "size", "n_true_positive", "n_tp_selected"}

    def table_rows(self) -> list:
        return [{"bucket": b, **self.buckets[b]} for b in BUCKETS]


def easiness_split_report(easiness, losses, lambdas, pseudo_labels, ground_truth) -> EasinessReport:
    """Per-bucket selection mAP and recall, macro-averaged over classes."""
    losses = np.asarray(losses, dtype=np.float64)
    gt = np.asarray(ground_truth).astype(bool)
    parts = easiness_buckets(np.asarray(easiness, dtype=np.float64), pseudo_labels)
    result = {}
    for b in BUCKETS:
        aps, recalls, size, n_tp_all, n_sel_tp_all = [], [], 0, 0, 0
        for c, split in parts.items():
            idx = split[b]
            size += idx.size
            truth = gt[idx, c]
            n_tp = int(truth.sum())
            if n_tp == 0:
                continue
            sel = losses[idx, c] < lambdas[c]
            n_sel_tp = int((sel & truth).sum())
            n_tp_all += n_tp
            n_sel_tp_all += n_sel_tp
            recalls.append(n_sel_tp / n_tp)
            aps.append(average_precision(-losses[idx, c], truth))
        result[b] = {
            "map": float(np.mean(aps)) if aps else float("nan"),
            "recall": float(np.mean(recalls)) if recalls else float("nan"),
            "size": size,
            "n_true_positive": n_tp_all,
            "n_tp_selected": n_sel_tp_all,
        }
    return EasinessReport(result)


# --------------------------------------------------------------------------
# experiment drivers
# --------------------------------------------------------------------------

def baseline_config(cfg: TrainConfig, test_modality: str = CONCAT) -> TrainConfig:
    return replace(cfg, train_modalities=(test_modality,), test_modality=test_modality, voters=None)


def mmco_config(cfg: TrainConfig, dataset: MultimodalDataset, test_modality: str = CONCAT) -> TrainConfig:
    """Every modality of the dataset trains and votes; ``test_modality`` is used at test time."""
    return replace(cfg, train_modalities=tuple(dataset.modality_names), test_modality=test_modality,
                   voters=None)


def run_method(train: MultimodalDataset, cfg: TrainConfig, test: Optional[MultimodalDataset] = None,
               track_epochs=None) -> dict:
    """Train (online WELL or MMCo depending on the config) and collect selection and test metrics."""
    tracker = SelectionTracker(train, epochs=track_epochs) if train.ground_truth is not None else None
    single = len(cfg.train_modalities) == 1
    trainer = train_online_well if single else train_mmco
    state = trainer(train, None, cfg, on_epoch_end=tracker)
    out = {"state": state, "tracker": tracker}
    if test is not None:
        out["test"] = test_metrics(state.test_params, test, cfg.test_modality)
    return out


def synth_pair(cfg: SynthConfig) -> tuple:
    """Train and test splits with the concat modality appended."""
    return with_concat(synth_generate(cfg, "train")), with_concat(synth_generate(cfg, "test"))


def hard_example_experiment(synth: SynthConfig, cfg: TrainConfig, seeds: Sequence[int],
                            easiness_epochs: Optional[int] = None) -> list:
    """MMCo(voting from cfg) vs the concat-only baseline, evaluated at the first p = p_max epoch.

    One row per (seed, method) with selection precision/recall/AP, easy/normal/hard
    bucket recall and mAP, and test metrics. Selection precision/recall at the
    final epoch is added as ``final_sel_*``.
    """
    rows = []
    for seed in seeds:
        train, test = synth_pair(replace(synth, seed=seed))
        run_cfg = replace(cfg, seed=seed)
        at = first_cap_epoch(run_cfg)
        ease = easiness_scores(train, None, baseline_config(run_cfg), epochs=easiness_epochs)
        for method, mcfg in (("baseline", baseline_config(run_cfg)),
                             (f"mmco-{run_cfg.voting}", mmco_config(run_cfg, train))):
            last = run_cfg.epochs - 1
            res = run_method(train, mcfg, test, track_epochs={at, last})
            snap = res["tracker"].snapshots[at]
            final = res["tracker"].snapshots[last]["report"]
            sel = snap["report"]
            ez = easiness_split_report(ease, snap["losses"], snap["lambdas"], train.labels.labels,
                                       train.ground_truth)
            row = {"seed": seed, "method": method, "epoch": at, "p": snap["p"],
                   "sel_precision": sel.precision, "sel_recall": sel.recall, "sel_ap": sel.ap,
                   "test_map": res["test"]["map"],
                   "final_sel_precision": final.precision, "final_sel_recall": final.recall}
            for b in BUCKETS:
                row[f"{b}_recall"] = ez.buckets[b]["recall"]
                row[f"{b}_map"] = ez.buckets[b]["map"]
            rows.append(row)
    return rows


def noise_sweep(base: SynthConfig, levels: Sequence[float], cfg: TrainConfig,
                seeds: Sequence[int], threads: int = 1) -> list:
    """Test mAP with and without MMCo for every (noise level, seed)."""
    cells = [(lvl, seed) for lvl in levels for seed in seeds]
    for lvl in levels:
        if not 0 <= lvl < 1:
            raise ValueError(f"noise level {lvl} outside [0, 1)")

    def run(cell):
        lvl, seed = cell
        train, test = synth_pair(replace(base, noise_level=lvl, seed=seed))
        run_cfg = replace(cfg, seed=seed)
        out = []
        for method, mcfg in (("baseline", baseline_config(run_cfg)),
                             (f"mmco-{run_cfg.voting}", mmco_config(run_cfg, train))):
            res = run_method(train, mcfg, test, track_epochs=set())
            out.append({"noise": lvl, "seed": seed, "method": method, "test_map": res["test"]["map"]})
        return out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    return [row for rows in results for row in rows]


def modality_ablation(train: MultimodalDataset, test: MultimodalDataset, subsets: Sequence[Sequence[str]],
                      cfg: TrainConfig) -> list:
    """Vary the voting (selection) modalities while keeping the test classifier fixed.

    Each row trains ``subset + [test_modality]`` with only ``subset`` voting;
    selection metrics are taken at the first epoch where p reaches p_max.
    """
    rows = []
    at = first_cap_epoch(cfg)
    for subset in subsets:
        subset = tuple(subset)
        unknown = [m for m in subset if m not in train.modality_names]
        if unknown or not subset:
            raise ValueError(f"unknown or empty modality subset {subset}; have {train.modality_names}")
        mods = subset if cfg.test_modality in subset else subset + (cfg.test_modality,)
        mcfg = replace(cfg, train_modalities=mods, voters=subset)
        res = run_method(train, mcfg, test, track_epochs={at})
        sel = res["tracker"].snapshots[at]["report"]
        rows.append({"subset": "+".join(subset), "sel_map": sel.ap, "sel_precision": sel.precision,
                     "sel_recall": sel.recall, "test_map": res["test"]["map"],
                     "prec@10": res["test"].get("prec@10"), "prec@100": res["test"].get("prec@100")})
    return rows


# --------------------------------------------------------------------------
# report output
# --------------------------------------------------------------------------

def summarize(rows: Sequence[dict], by: Sequence[str], values: Sequence[str]) -> list:
    """Mean and standard deviation of ``values`` grouped by the ``by`` keys (first-seen order)."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r)
    out = []
    for key, rs in groups.items():
        rec = dict(zip(by, key))
        rec["n"] = len(rs)
        for v in values:
            x = np.array([r[v] for r in rs], dtype=np.float64)
            rec[f"{v}_mean"] = float(np.mean(x))
            rec[f"{v}_std"] = float(np.std(x))
        out.append(rec)
    return out


def format_table(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_jsonl(rows: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, default=_jsonable) + "\n")


def write_tsv(rows: Sequence[dict], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(str(r.get(c)) for c in cols) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
