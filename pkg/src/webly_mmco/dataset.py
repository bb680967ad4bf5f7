"""Multimodal dataset model, on-disk format, concat modality and synthetic generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .pseudolabel import PseudoLabelMatrix, read_labels_jsonl, write_labels_jsonl

FORMAT_VERSION = "webly-mmco/1"
TRAIN_ONLY = "train-only"
TRAIN_AND_TEST = "train-and-test"
CONCAT = "concat"


class DatasetFormatError(ValueError):
    """Raised when a dataset directory or in-memory dataset violates the format."""


@dataclass(frozen=True)
class ModalityDescriptor:
    name: str
    dim: int
    role: str = TRAIN_AND_TEST

    def __post_init__(self):
        if not self.name:
            raise ValueError("modality name must be nonempty")
        if int(self.dim) < 1:
            raise ValueError(f"modality {self.name!r}: dim must be >= 1, got {self.dim}")
        if self.role not in (TRAIN_ONLY, TRAIN_AND_TEST):
            raise ValueError(f"modality {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class MultimodalDataset:
    """N samples, each with one feature vector per modality.

    ``ground_truth`` is for evaluation only. ``labels`` holds pseudo labels when
    they have been inferred (or written by the generator). ``provenance`` carries
    generator bookkeeping (false-positive flags, hard modality per sample) and,
    like ground truth, must only be read by evaluation code.
    """

    meta: tuple
    features: dict
    class_names: tuple
    metadata: Optional[tuple] = None
    ground_truth: Optional[np.ndarray] = None
    labels: Optional[PseudoLabelMatrix] = None
    provenance: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "meta", tuple(self.meta))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.metadata is not None:
            object.__setattr__(self, "metadata", tuple(self.metadata))
        self.validate()

    @property
    def n_samples(self) -> int:
        if not self.meta:
            return 0
        return int(self.features[self.meta[0].name].shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def modality_names(self) -> list:
        return [m.name for m in self.meta]

    def modality(self, name: str) -> ModalityDescriptor:
        for m in self.meta:
            if m.name == name:
                return m
        raise KeyError(f"unknown modality {name!r}; have {self.modality_names}")

    def validate(self) -> None:
        names = [m.name for m in self.meta]
        if len(set(names)) != len(names):
            raise DatasetFormatError(f"duplicate modality names: {names}")
        if not self.meta:
            raise DatasetFormatError("dataset needs at least one modality")
        if not any(m.role == TRAIN_AND_TEST for m in self.meta):
            raise DatasetFormatError("at least one modality must be train-and-test")
        if set(self.features) != set(names):
            raise DatasetFormatError(
                f"feature keys {sorted(self.features)} do not match modalities {sorted(names)}")
        n = None
        for m in self.meta:
            x = self.features[m.name]
            if x.ndim != 2 or x.shape[1] != m.dim:
                raise DatasetFormatError(
                    f"modality {m.name!r}: expected shape (N, {m.dim}), got {x.shape}")
            if n is None:
                n = x.shape[0]
            elif x.shape[0] != n:
                raise DatasetFormatError(
                    f"modality {m.name!r} has {x.shape[0]} rows, expected {n}")
            bad = ~np.isfinite(x)
            if bad.any():
                idx = int(np.argwhere(bad)[0, 0])
                raise DatasetFormatError(f"modality {m.name!r}: non-finite value at sample {idx}")
        if self.metadata is not None and len(self.metadata) != n:
            raise DatasetFormatError(f"metadata has {len(self.metadata)} records, expected {n}")
        if self.ground_truth is not None:
            gt = self.ground_truth
            if gt.shape != (n, len(self.class_names)):
                raise DatasetFormatError(
                    f"ground truth shape {gt.shape}, expected {(n, len(self.class_names))}")
            if not np.isin(gt, (0, 1)).all():
                raise DatasetFormatError("ground truth entries must be 0 or 1")
        if self.labels is not None and self.labels.labels.shape != (n, len(self.class_names)):
            raise DatasetFormatError(
                f"pseudo labels shape {self.labels.labels.shape}, expected {(n, len(self.class_names))}")

    def equals(self, other: "MultimodalDataset") -> bool:
        """Field-by-field equality (feature arrays compared exactly)."""
        if self.meta != other.meta or self.class_names != other.class_names:
            return False
        if self.metadata != other.metadata:
            return False
        for name in self.modality_names:
            if not np.array_equal(self.features[name], other.features[name]):
                return False
        if (self.ground_truth is None) != (other.ground_truth is None):
            return False
        if self.ground_truth is not None and not np.array_equal(self.ground_truth, other.ground_truth):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or self.labels.equals(other.labels)

    def without_ground_truth(self) -> "MultimodalDataset":
        """View used by training code: drops ground truth and generator bookkeeping."""
        return replace(self, ground_truth=None, provenance=None)

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features={k: v[idx] for k, v in self.features.items()},
            metadata=None if self.metadata is None else tuple(self.metadata[i] for i in idx),
            ground_truth=None if self.ground_truth is None else self.ground_truth[idx],
            labels=None if self.labels is None else self.labels.subset(idx),
            provenance=None if self.provenance is None else {k: v[idx] for k, v in self.provenance.items()},
        )


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------

def save_dataset(d: MultimodalDataset, path) -> None:
    """Write ``d`` as a dataset directory.

    Features are stored as 32-bit floats, so only datasets whose values are
    exactly representable in float32 (everything the generator emits) round-trip
    bit for bit.
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": FORMAT_VERSION,
            "n_samples": d.n_samples,
            "class_names": list(d.class_names),
            "modalities": [{"name": m.name, "dim": m.dim, "role": m.role} for m in d.meta],
            "has_metadata": d.metadata is not None,
            "has_labels": d.labels is not None,
            "has_ground_truth": d.ground_truth is not None,
            "has_provenance": d.provenance is not None,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        for m in d.meta:
            d.features[m.name].astype("<f4").tofile(path / f"features_{m.name}.f32")
        for name in ("metadata.jsonl", "labels.jsonl", "ground_truth.u8", "provenance.npz"):
            (path / name).unlink(missing_ok=True)
        if d.metadata is not None:
            with open(path / "metadata.jsonl", "w", encoding="utf-8") as f:
                for text in d.metadata:
                    f.write(json.dumps({"text": text}) + "\n")
        if d.labels is not None:
            write_labels_jsonl(d.labels, d.class_names, path / "labels.jsonl")
        if d.ground_truth is not None:
            d.ground_truth.astype(np.uint8).tofile(path / "ground_truth.u8")
        if d.provenance is not None:
            np.savez(path / "provenance.npz", **d.provenance)
    except OSError as e:
        raise OSError(f"failed writing dataset to {path}: {e}") from e


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    return path


def load_dataset(path) -> MultimodalDataset:
    path = Path(path)
    manifest = json.loads(_require(path / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported manifest version {manifest.get('version')!r}")
    n = int(manifest["n_samples"])
    class_names = tuple(manifest["class_names"])
    meta = tuple(ModalityDescriptor(m["name"], int(m["dim"]), m["role"]) for m in manifest["modalities"])
    features = {}
    for m in meta:
        raw = np.fromfile(_require(path / f"features_{m.name}.f32"), dtype="<f4")
        if raw.size % m.dim != 0:
            raise DatasetFormatError(
                f"features_{m.name}.f32 holds {raw.size} floats, not a multiple of dim {m.dim}")
        rows = raw.size // m.dim
        if rows != n:
            raise DatasetFormatError(
                f"features_{m.name}.f32 has {rows} rows (dim {m.dim}) but manifest declares {n}")
        x = raw.reshape(n, m.dim).astype(np.float64)
        bad = ~np.isfinite(x)
        if bad.any():
            raise DatasetFormatError(
                f"features_{m.name}.f32: non-finite value at sample {int(np.argwhere(bad)[0, 0])}")
        features[m.name] = x
    metadata = None
    if manifest.get("has_metadata"):
        with open(_require(path / "metadata.jsonl"), encoding="utf-8") as f:
            metadata = tuple(json.loads(line)["text"] for line in f if line.strip())
        if len(metadata) != n:
            raise DatasetFormatError(f"metadata.jsonl has {len(metadata)} records, manifest declares {n}")
    labels = None
    if manifest.get("has_labels") or (path / "labels.jsonl").exists():
        labels = read_labels_jsonl(_require(path / "labels.jsonl"), class_names, n)
    ground_truth = None
    if manifest.get("has_ground_truth"):
        raw = np.fromfile(_require(path / "ground_truth.u8"), dtype=np.uint8)
        if raw.size != n * len(class_names):
            raise DatasetFormatError(
                f"ground_truth.u8 has {raw.size} bytes, expected {n} x {len(class_names)}")
        ground_truth = raw.reshape(n, len(class_names))
    provenance = None
    if manifest.get("has_provenance"):
        with np.load(_require(path / "provenance.npz"), allow_pickle=False) as z:
            provenance = {k: z[k] for k in z.files}
    return MultimodalDataset(meta, features, class_names, metadata, ground_truth, labels, provenance)


def make_concat_modality(d: MultimodalDataset, members: Sequence[str]) -> MultimodalDataset:
    """Append a ``concat`` modality built from ``members`` in the given order."""
    members = list(members)
    if not members:
        raise ValueError("concat needs at least one member modality")
    if CONCAT in d.modality_names:
        raise ValueError("dataset already has a 'concat' modality")
    if CONCAT in members:
        raise ValueError("'concat' cannot be a member of itself")
    unknown = [m for m in members if m not in d.modality_names]
    if unknown:
        raise ValueError(f"unknown member modalities {unknown}; have {d.modality_names}")
    x = np.concatenate([d.features[m] for m in members], axis=1)
    desc = ModalityDescriptor(CONCAT, x.shape[1], TRAIN_AND_TEST)
    return replace(d, meta=d.meta + (desc,), features={**d.features, CONCAT: x})


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Controls for the Gaussian multimodal noisy-label generator.

    ``train_only`` lists modality indices flagged train-only (a metadata-like
    view that the test classifier may not read).
    """

    n_classes: int = 5
    n_per_class: int = 200
    n_background: int = 1000
    modality_dims: tuple = (16, 16, 16)
    noise_level: float = 0.5
    hard_fraction: float = 0.3
    class_separation: float = 3.0
    seed: int = 0
    train_only: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "train_only", tuple(int(i) for i in self.train_only))
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.n_background < 0:
            raise ValueError("n_background must be >= 0")
        if not self.modality_dims or any(d < 1 for d in self.modality_dims):
            raise ValueError(f"modality dims must all be >= 1, got {self.modality_dims}")
        if not 0.0 <= self.noise_level < 1.0:
            raise ValueError(f"noise_level must be in [0, 1), got {self.noise_level}")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError(f"hard_fraction must be in [0, 1], got {self.hard_fraction}")
        if not self.class_separation > 0:
            raise ValueError("class_separation must be positive")
        if any(not 0 <= i < len(self.modality_dims) for i in self.train_only):
            raise ValueError(f"train_only indices out of range: {self.train_only}")
        if len(self.train_only) >= len(self.modality_dims):
            raise ValueError("at least one modality must be train-and-test")


def _seed64(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def class_name(c: int) -> str:
    return f"concept{c:02d}"


def modality_name(m: int) -> str:
    return f"m{m}"


def _class_means(cfg: SynthConfig) -> list:
    """Per modality, a (C, dim) array of class centres at distance class_separation from the origin."""
    rng = np.random.default_rng([_seed64(cfg.seed), 0x5EED])
    means = []
    for dim in cfg.modality_dims:
        mu = rng.standard_normal((cfg.n_classes, dim))
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
        means.append(mu * cfg.class_separation)
    return means


def synth_generate(cfg: SynthConfig, split: str = "train") -> MultimodalDataset:
    """Generate a noisily pseudo-labeled multimodal dataset.

    The ``train`` split has, per class, ``n_per_class`` pseudo-positive samples
    of which ``floor(noise_level * n_per_class)`` are background draws (false
    positives), plus ``n_background`` pseudo-negative background samples. The
    ``test`` split uses the same class centres, has no label noise (every class
    sample is a true positive) and a fresh draw of samples. In both splits a
    ``hard_fraction`` of true positives has one uniformly chosen modality
    replaced by a background draw. Sample order is shuffled so that index
    carries no information.
    """
    cfg.validate()
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    means = _class_means(cfg)
    rng = np.random.default_rng([_seed64(cfg.seed), 1 if split == "train" else 2])
    C, M = cfg.n_classes, len(cfg.modality_dims)
    n_fp = math.floor(cfg.noise_level * cfg.n_per_class) if split == "train" else 0
    n_tp = cfg.n_per_class - n_fp

    cls, is_fp, pseudo = [], [], []
    for c in range(C):
        cls += [c] * cfg.n_per_class
        is_fp += [False] * n_tp + [True] * n_fp
        pseudo += [c] * cfg.n_per_class
    cls += [-1] * cfg.n_background
    is_fp += [False] * cfg.n_background
    pseudo += [-1] * cfg.n_background
    cls, is_fp, pseudo = np.array(cls, dtype=np.int64), np.array(is_fp), np.array(pseudo, dtype=np.int64)
    N = cls.size

    true_pos = (cls >= 0) & ~is_fp
    tp_idx = np.flatnonzero(true_pos)
    n_hard = int(round(cfg.hard_fraction * tp_idx.size))
    hard_modality = np.full(N, -1, dtype=np.int64)
    if n_hard:
        chosen = rng.choice(tp_idx, size=n_hard, replace=False)
        hard_modality[chosen] = rng.integers(0, M, size=n_hard)

    member = true_pos  # samples drawn from their class cluster (before hard corruption)
    features = {}
    for m, dim in enumerate(cfg.modality_dims):
        x = rng.standard_normal((N, dim))
        use_class = member & (hard_modality != m)
        x[use_class] += means[m][cls[use_class]]
        features[modality_name(m)] = x

    perm = rng.permutation(N)
    features = {k: v[perm].astype(np.float32).astype(np.float64) for k, v in features.items()}
    cls, is_fp, pseudo, hard_modality = cls[perm], is_fp[perm], pseudo[perm], hard_modality[perm]

    names = tuple(class_name(c) for c in range(C))
    gt = np.zeros((N, C), dtype=np.uint8)
    tp = np.flatnonzero((cls >= 0) & ~is_fp)
    gt[tp, cls[tp]] = 1

    counts = np.zeros((N, C), dtype=np.int64)
    pos = np.flatnonzero(pseudo >= 0)
    counts[pos, pseudo[pos]] = 1
    labels = PseudoLabelMatrix.from_counts(counts)
    metadata = tuple(
        f"clip {i:05d} {names[p]}" if p >= 0 else f"clip {i:05d} misc footage"
        for i, p in enumerate(pseudo)
    )
    meta = tuple(
        ModalityDescriptor(modality_name(m), dim, TRAIN_ONLY if m in cfg.train_only else TRAIN_AND_TEST)
        for m, dim in enumerate(cfg.modality_dims)
    )
    provenance = {
        "class_id": cls,
        "pseudo_class": pseudo,
        "is_false_positive": is_fp,
        "hard_modality": hard_modality,
    }
    return MultimodalDataset(meta, features, names, metadata, gt, labels, provenance)


def content_modalities(d: MultimodalDataset) -> list:
    """Train-and-test modalities other than concat (the members of the concat view)."""
    return [m.name for m in d.meta if m.role == TRAIN_AND_TEST and m.name != CONCAT]


def with_concat(d: MultimodalDataset) -> MultimodalDataset:
    return make_concat_modality(d, content_modalities(d))


# --------------------------------------------------------------------------
# minibatches
# --------------------------------------------------------------------------

def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([_seed64(seed), int(epoch)]).permutation(n)


def minibatch_iterator(d, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield index batches covering a (seed, epoch)-determined permutation of the samples.

    ``d`` may be a dataset or a sample count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = d if isinstance(d, (int, np.integer)) else d.n_samples
    perm = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]
