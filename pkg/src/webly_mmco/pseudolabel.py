"""Pseudo labels and label confidences from metadata word matching."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list:
    """Lowercase and split on any non-alphanumeric character."""
    return [t for t in _SPLIT.split(text.lower()) if t]


def match_concept(concept: str, text: str) -> int:
    """Count non-overlapping occurrences of the concept's tokens as a contiguous run in ``text``."""
    needle = tokenize(concept)
    if not needle:
        raise ValueError(f"concept {concept!r} has no alphanumeric tokens")
    hay = tokenize(text)
    k = len(needle)
    count, i = 0, 0
    while i + k <= len(hay):
        if hay[i:i + k] == needle:
            count += 1
            i += k
        else:
            i += 1
    return count


def confidence_from_count(count: int) -> float:
    """Prior confidence of a positive pseudo label matched ``count`` times: count / (count + 1)."""
    if count < 1:
        raise ValueError(f"confidence is only defined for count >= 1, got {count}")
    return count / (count + 1.0)


@dataclass(frozen=True)
class PseudoLabelMatrix:
    labels: np.ndarray        # (N, C) uint8
    confidence: np.ndarray    # (N, C) float64, v0
    match_counts: np.ndarray  # (N, C) int64

    def __post_init__(self):
        if not (self.labels.shape == self.confidence.shape == self.match_counts.shape):
            raise ValueError("labels, confidence and match_counts must share a shape")
        if self.labels.ndim != 2:
            raise ValueError("pseudo label arrays must be 2-D (N, C)")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        if not ((self.confidence > 0) & (self.confidence <= 1)).all():
            raise ValueError("confidences must lie in (0, 1]")
        if (self.match_counts < 0).any():
            raise ValueError("match counts must be nonnegative")
        if not np.array_equal(self.labels == 1, self.match_counts >= 1):
            raise ValueError("a label is positive exactly when its match count is >= 1")
        if not (self.confidence[self.labels == 0] == 1.0).all():
            raise ValueError("negative-labeled entries must have confidence 1")

    @classmethod
    def from_counts(cls, counts) -> "PseudoLabelMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        labels = (counts >= 1).astype(np.uint8)
        conf = np.where(counts >= 1, counts / (counts + 1.0), 1.0)
        return cls(labels, conf, counts)

    @property
    def shape(self):
        return self.labels.shape

    def equals(self, other: "PseudoLabelMatrix") -> bool:
        return (np.array_equal(self.labels, other.labels)
                and np.array_equal(self.confidence, other.confidence)
                and np.array_equal(self.match_counts, other.match_counts))

    def subset(self, idx) -> "PseudoLabelMatrix":
        return PseudoLabelMatrix(self.labels[idx], self.confidence[idx], self.match_counts[idx])

    def positive_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0).astype(np.int64)


def label_texts(texts: Sequence, concepts: Sequence[str]) -> PseudoLabelMatrix:
    missing = [i for i, t in enumerate(texts) if t is None]
    if missing:
        raise ValueError(f"metadata missing for samples {missing[:20]}"
                         + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))
    counts = np.zeros((len(texts), len(concepts)), dtype=np.int64)
    for c, concept in enumerate(concepts):
        for n, text in enumerate(texts):
            counts[n, c] = match_concept(concept, text)
    return PseudoLabelMatrix.from_counts(counts)


def label_dataset(d, concepts: Sequence[str]) -> PseudoLabelMatrix:
    """Pseudo-label every sample of ``d`` against ``concepts`` using its metadata text."""
    if d.metadata is None:
        raise ValueError(f"dataset has no metadata; samples {list(range(min(d.n_samples, 20)))} lack text")
    return label_texts(d.metadata, concepts)


# --------------------------------------------------------------------------
# labels.jsonl
# --------------------------------------------------------------------------

NEGATIVE_DEFAULT = {"y": 0, "v0": 1.0, "count": 0}


def write_labels_jsonl(labels: PseudoLabelMatrix, class_names: Sequence[str], path) -> None:
    """One record per sample: positive classes spelled out, everything else the negative default."""
    with open(path, "w", encoding="utf-8") as f:
        for n in range(labels.shape[0]):
            pos = np.flatnonzero(labels.labels[n])
            rec = {
                "n": n,
                "positive": {
                    class_names[c]: {
                        "y": 1,
                        "v0": float(labels.confidence[n, c]),
                        "count": int(labels.match_counts[n, c]),
                    }
                    for c in pos
                },
                "default": NEGATIVE_DEFAULT,
            }
            f.write(json.dumps(rec) + "\n")


def read_labels_jsonl(path, class_names: Sequence[str], n: int) -> PseudoLabelMatrix:
    index = {name: c for c, name in enumerate(class_names)}
    C = len(class_names)
    labels = np.zeros((n, C), dtype=np.uint8)
    conf = np.ones((n, C), dtype=np.float64)
    counts = np.zeros((n, C), dtype=np.int64)
    seen = 0
    with open(Path(path), encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            i = int(rec["n"])
            if not 0 <= i < n:
                raise ValueError(f"{path}: sample index {i} out of range for N={n}")
            for name, entry in rec["positive"].items():
                if name not in index:
                    raise ValueError(f"{path}: unknown class {name!r} at sample {i}")
                c = index[name]
                labels[i, c] = entry["y"]
                conf[i, c] = entry["v0"]
                counts[i, c] = entry["count"]
            seen += 1
    if seen != n:
        raise ValueError(f"{path}: {seen} records, expected {n}")
    return PseudoLabelMatrix(labels, conf, counts)
