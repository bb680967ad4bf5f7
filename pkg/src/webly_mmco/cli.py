"""Command-line entry point: ``webly-mmco <command> [options]``.

Every command resolves its configuration (JSON file, then flags on top),
writes the resolved snapshot to ``--out`` as ``config.json`` and then calls
the library. Exit codes: 0 success, 1 a ``check`` failed, 2 configuration
error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation, models
from .dataset import (CONCAT, DatasetFormatError, MultimodalDataset, SynthConfig, load_dataset,
                      save_dataset, synth_generate, with_concat)
from .evaluation import UndefinedMetricError
from .pseudolabel import label_dataset
from .selfpaced import AgeStateError, compute_sample_weight, regularizer_value
from .training import (TrainConfig, save_checkpoint, train_batch_well, train_mmco,
                       train_online_well, write_metrics_log)

log = logging.getLogger("webly_mmco")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; raised before any work starts."""


class DataError(ValueError):
    """Input data missing or inconsistent with the request."""


@dataclass
class RunConfig:
    """Everything a command needs; serialized verbatim as the resolved-config snapshot."""

    command: str
    train: dict = field(default_factory=dict)
    synth: Optional[dict] = None
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    out: Optional[str] = None
    threads: int = 1
    options: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig.from_dict, self.train, "train")

    def synth_config(self) -> SynthConfig:
        return _build(lambda d: SynthConfig(**d), self.synth or {}, "synth")


def _build(factory, d, section):
    try:
        return factory(dict(d))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

_SCHEDULE_FLAGS = {"p_init": "p_init", "p_step": "p_step", "p_max": "p_max",
                   "queue_capacity": "queue_capacity"}
_TRAIN_FLAGS = ("seed", "voting", "batch_size", "epochs", "lr")


def resolve_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    # "command" and "out" appear in snapshots; they are ignored so a snapshot can be replayed
    unknown = set(raw) - {"train", "synth", "dataset", "test_dataset", "threads", "options",
                          "command", "out"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    train = dict(raw.get("train", {}))
    schedule = dict(train.get("schedule", {}))
    for flag, key in _SCHEDULE_FLAGS.items():
        if getattr(args, flag, None) is not None:
            schedule[key] = getattr(args, flag)
    if schedule:
        train["schedule"] = schedule
    for flag in _TRAIN_FLAGS:
        if getattr(args, flag, None) is not None:
            train[flag] = getattr(args, flag)
    if getattr(args, "modalities", None):
        train["train_modalities"] = [m for m in args.modalities.split(",") if m]
    if getattr(args, "test_modality", None):
        train["test_modality"] = args.test_modality
    mods = train.get("train_modalities")
    if mods and "test_modality" not in train and CONCAT not in mods:
        train["test_modality"] = mods[0]

    synth = raw.get("synth")
    synth_flags = {k: getattr(args, k, None) for k in ("noise_level", "hard_fraction")}
    if any(v is not None for v in synth_flags.values()) or args.command == "synth":
        synth = dict(synth or {})
        synth.update({k: v for k, v in synth_flags.items() if v is not None})
    if synth is not None and getattr(args, "seed", None) is not None:
        synth["seed"] = args.seed

    dataset = getattr(args, "dataset", None) or raw.get("dataset")
    test_dataset = getattr(args, "test_dataset", None) or raw.get("test_dataset")
    threads = args.threads if getattr(args, "threads", None) else raw.get("threads", os.cpu_count() or 1)
    rc = RunConfig(args.command, train, synth, dataset, test_dataset, getattr(args, "out", None),
                   int(threads), dict(raw.get("options", {})))
    # validate eagerly so errors surface before any work
    rc.train_config()
    if rc.synth is not None:
        rc.synth_config()
    if args.command in ("train", "ablate"):
        if (rc.dataset is None) == (rc.synth is None):
            raise ConfigError("give exactly one data source: a dataset directory or a synth section")
    if rc.threads < 1:
        raise ConfigError("threads must be >= 1")
    return rc


def write_snapshot(rc: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = asdict(rc)
    snap["train"] = rc.train_config().to_dict()
    if rc.synth is not None:
        snap["synth"] = asdict(rc.synth_config())
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _out(rc: RunConfig) -> Path:
    if not rc.out:
        raise ConfigError("--out is required for this command")
    return Path(rc.out)


def _data(rc: RunConfig) -> tuple:
    """(train, test) datasets from the configured source; test may be None."""
    if rc.dataset is not None:
        train = load_dataset(rc.dataset)
        test = load_dataset(rc.test_dataset) if rc.test_dataset else None
        return train, test
    syn = rc.synth_config()
    return with_concat(synth_generate(syn, "train")), with_concat(synth_generate(syn, "test"))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(rc: RunConfig) -> dict:
    out = _out(rc)
    syn = rc.synth_config()
    write_snapshot(rc, out)
    summary = {}
    for split in ("train", "test"):
        d = with_concat(synth_generate(syn, split))
        save_dataset(d, out / split)
        summary[split] = {"n_samples": d.n_samples, "modalities": d.modality_names,
                          "positives_per_class": d.labels.positive_counts().tolist()}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_label(rc: RunConfig, concepts_file: str) -> dict:
    if rc.dataset is None:
        raise ConfigError("label needs --dataset")
    path = Path(concepts_file)
    if not path.exists():
        raise DataError(f"concepts file not found: {path}")
    concepts = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not concepts:
        raise DataError(f"concepts file {path} lists no concepts")
    d = load_dataset(rc.dataset)
    labels = label_dataset(d, concepts)
    gt = d.ground_truth if tuple(concepts) == tuple(d.class_names) else None
    relabeled = MultimodalDataset(d.meta, d.features, tuple(concepts), d.metadata, gt, labels,
                                  d.provenance)
    save_dataset(relabeled, rc.dataset)
    counts = dict(zip(concepts, labels.positive_counts().tolist()))
    for name, n in counts.items():
        if n == 0:
            log.warning("concept %r matched no sample", name)
    print(json.dumps({"positives_per_class": counts}))
    return counts


def cmd_train(rc: RunConfig, method: str = "auto") -> dict:
    out = _out(rc)
    cfg = rc.train_config()
    train, test = _data(rc)
    write_snapshot(rc, out)
    tracker = evaluation.SelectionTracker(train) if train.ground_truth is not None else None
    if method == "auto":
        method = "mmco" if len(cfg.train_modalities) > 1 else "well"
    if method == "batch":
        state = train_batch_well(train, None, cfg)
    else:
        trainer = train_mmco if method == "mmco" else train_online_well
        state = trainer(train, None, cfg, on_epoch_end=tracker,
                        checkpoint_dir=out / "checkpoints" if cfg.checkpoint_every else None)
        write_metrics_log(state.reports, out / "metrics.jsonl")
    if method == "batch":
        write_metrics_log(state.reports, out / "metrics.jsonl")
    save_checkpoint(state, out)
    report = {"method": method, "test_modality": cfg.test_modality,
              "model": str(out / f"model_{cfg.test_modality}.npz")}
    if test is not None and test.ground_truth is not None:
        report["test"] = evaluation.test_metrics(state.test_params, test, cfg.test_modality)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return report


def _load_model_for(model_path, dataset, modality):
    params, manifest = models.load_model(model_path)
    modality = modality or manifest["modality"]
    if modality not in dataset.modality_names:
        raise DataError(f"dataset has no modality {modality!r}")
    if list(manifest["class_names"]) != list(dataset.class_names):
        raise DataError(f"model classes {manifest['class_names']} differ from dataset "
                        f"classes {list(dataset.class_names)}")
    return params, modality


def cmd_eval(rc: RunConfig, model_path: str, modality: Optional[str] = None) -> dict:
    if rc.dataset is None:
        raise ConfigError("eval needs --dataset")
    d = load_dataset(rc.dataset)
    if d.ground_truth is None:
        raise DataError("eval needs a dataset with ground truth")
    params, modality = _load_model_for(model_path, d, modality)
    report = {"model": str(model_path), "modality": modality,
              **evaluation.test_metrics(params, d, modality)}
    if rc.out:
        write_snapshot(rc, Path(rc.out))
        (Path(rc.out) / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return report


def cmd_retrieve(rc: RunConfig, model_path: str, class_name: str, k: int,
                 modality: Optional[str] = None) -> list:
    if rc.dataset is None:
        raise ConfigError("retrieve needs --dataset")
    d = load_dataset(rc.dataset)
    params, modality = _load_model_for(model_path, d, modality)
    if class_name not in d.class_names:
        raise DataError(f"unknown class {class_name!r}; have {list(d.class_names)}")
    hits = evaluation.top_k_retrieval(params, d, d.class_names.index(class_name), k, modality)
    for rank, (i, s) in enumerate(hits, 1):
        print(f"{rank}\t{i}\t{s:.6f}")
    if rc.out:
        write_snapshot(rc, Path(rc.out))
        evaluation.write_tsv([{"rank": r, "index": i, "score": s} for r, (i, s) in enumerate(hits, 1)],
                             Path(rc.out) / "retrieval.tsv")
    return hits


def cmd_sweep_noise(rc: RunConfig, levels, seeds) -> list:
    out = _out(rc)
    if rc.synth is None:
        raise ConfigError("sweep-noise needs a synth section (it regenerates data per noise level)")
    syn, cfg = rc.synth_config(), rc.train_config()
    write_snapshot(rc, out)
    rows = evaluation.noise_sweep(syn, levels, cfg, seeds, threads=rc.threads)
    summary = evaluation.summarize(rows, ["noise", "method"], ["test_map"])
    evaluation.write_jsonl(rows, out / "noise_sweep.jsonl")
    evaluation.write_tsv(summary, out / "noise_sweep.tsv")
    print(evaluation.format_table(summary))
    return summary


def cmd_ablate(rc: RunConfig, subsets) -> list:
    out = _out(rc)
    train, test = _data(rc)
    if test is None:
        raise ConfigError("ablate needs a test dataset (--test-dataset) or a synth section")
    write_snapshot(rc, out)
    rows = evaluation.modality_ablation(train, test, subsets, rc.train_config())
    evaluation.write_tsv(rows, out / "ablation.tsv")
    print(evaluation.format_table(rows))
    return rows


def run_checks(seed: int = 0, n_instances: int = 50, n_weights: int = 1000) -> dict:
    """Gradient checks and the weight-rule grid oracle; returns worst errors and pass flags."""
    rng = np.random.default_rng(seed)
    worst = {"linear": 0.0, "mlp": 0.0}
    for i in range(n_instances):
        for kind in worst:
            dim, C, n = int(rng.integers(1, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 10))
            p = models.init_params(kind, dim, C, int(rng.integers(2, 9)), seed=int(rng.integers(1 << 31)))
            for t in p.tensors.values():
                t += 0.5 * rng.standard_normal(t.shape)
            X = rng.standard_normal((n, dim))
            Y = (rng.random((n, C)) < 0.5).astype(float)
            V = rng.random((n, C))
            worst[kind] = max(worst[kind], models.finite_difference_check(p, X, Y, V, seed=i))
    grid = np.linspace(0.0, 1.0, 10001)
    w_err = 0.0
    for l, lam in zip(rng.uniform(0, 2, n_weights), rng.uniform(0.01, 2, n_weights)):
        oracle = grid[np.argmin(grid * l + regularizer_value(grid, lam))]
        w_err = max(w_err, abs(compute_sample_weight(l, lam) - oracle))
    res = {"grad_linear": worst["linear"], "grad_mlp": worst["mlp"], "weight_rule": w_err}
    res["passed"] = bool(worst["linear"] <= 1e-5 and worst["mlp"] <= 1e-5 and w_err <= 1e-4)
    return res


def cmd_check(rc: RunConfig) -> dict:
    res = run_checks(seed=rc.train_config().seed)
    for k in ("grad_linear", "grad_mlp", "weight_rule"):
        print(f"{k}\t{res[k]:.3e}")
    print("PASS" if res["passed"] else "FAIL")
    if rc.out:
        write_snapshot(rc, Path(rc.out))
        (Path(rc.out) / "check.json").write_text(json.dumps(res, indent=2) + "\n")
    return res


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _floats(s):
    return [float(x) for x in s.split(",") if x]


def _ints(s):
    return [int(x) for x in s.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--voting", help="max, average or product")
    common.add_argument("--modalities", help="comma-separated train modalities")
    common.add_argument("--test-modality")
    common.add_argument("--p-init", type=float)
    common.add_argument("--p-step", type=float)
    common.add_argument("--p-max", type=float)
    common.add_argument("--queue-capacity", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--threads", type=int, help="worker threads (default: machine parallelism)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--test-dataset", help="held-out dataset directory")
    common.add_argument("--noise-level", type=float)
    common.add_argument("--hard-fraction", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="webly-mmco", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic train/test pair")
    p = sub.add_parser("label", parents=[common], help="pseudo-label a dataset from its metadata")
    p.add_argument("--concepts", required=True, help="text file with one concept per line")
    p = sub.add_parser("train", parents=[common], help="train online WELL, MMCo or batch WELL")
    p.add_argument("--method", choices=("auto", "well", "mmco", "batch"), default="auto")
    p = sub.add_parser("eval", parents=[common], help="test metrics of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--modality")
    p = sub.add_parser("sweep-noise", parents=[common], help="MMCo vs baseline across noise levels")
    p.add_argument("--levels", type=_floats, default=[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p = sub.add_parser("ablate", parents=[common], help="vary the voting modalities")
    p.add_argument("--subsets", required=True, help="semicolon-separated comma lists, e.g. m0;m0,m1")
    p = sub.add_parser("retrieve", parents=[common], help="top-k samples for a class")
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--modality")
    sub.add_parser("check", parents=[common], help="gradient checks and weight-rule oracle")
    return ap


def _dispatch(args, rc: RunConfig):
    c = args.command
    if c == "synth":
        return cmd_synth(rc), EXIT_OK
    if c == "label":
        return cmd_label(rc, args.concepts), EXIT_OK
    if c == "train":
        return cmd_train(rc, args.method), EXIT_OK
    if c == "eval":
        return cmd_eval(rc, args.model, args.modality), EXIT_OK
    if c == "sweep-noise":
        return cmd_sweep_noise(rc, args.levels, args.seeds), EXIT_OK
    if c == "ablate":
        subsets = [[m for m in s.split(",") if m] for s in args.subsets.split(";") if s]
        return cmd_ablate(rc, subsets), EXIT_OK
    if c == "retrieve":
        return cmd_retrieve(rc, args.model, args.class_name, args.k, args.modality), EXIT_OK
    res = cmd_check(rc)
    return res, EXIT_OK if res["passed"] else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, rc)[1]
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, FileNotFoundError, UndefinedMetricError,
            AgeStateError, ValueError) as e:
        print(f"data error ({args.command}): {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.exception("internal error in %s", args.command)
        print(f"internal error ({args.command}): {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
