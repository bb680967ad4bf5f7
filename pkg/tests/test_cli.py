import json

import numpy as np
import pytest

from webly_mmco import evaluation, models
from webly_mmco.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, run_checks)
from webly_mmco.dataset import load_dataset

SMALL = {"synth": {"n_classes": 3, "n_per_class": 30, "n_background": 40, "modality_dims": [3, 5, 2]},
         "train": {"epochs": 3, "batch_size": 16, "lr": 0.01}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def synth_dir(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["synth", "--config", str(cfg_file), "--out", str(out)]) == EXIT_OK
    return out


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_writes_loadable_splits(synth_dir):
    train = load_dataset(synth_dir / "train")
    assert train.n_samples == 3 * 30 + 40
    assert "concat" in train.modality_names
    snap = json.loads((synth_dir / "config.json").read_text())
    assert snap["synth"]["n_per_class"] == 30 and snap["command"] == "synth"


def test_synth_repeatable(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(cfg_file), "--seed", "5", "--out", str(tmp_path / name)]) == 0
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    a.pop("config.json"), b.pop("config.json")
    assert a == b


def test_invalid_noise_is_config_error(tmp_path):
    assert main(["synth", "--noise-level", "1.5", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert not (tmp_path / "x").exists()


def test_bad_config_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["check", "--config", str(p)]) == EXIT_CONFIG
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["train", "--voting", "median", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["nonsense"]) == EXIT_CONFIG


def test_missing_dataset_is_data_error(tmp_path):
    rc = main(["eval", "--dataset", str(tmp_path / "none"), "--model", str(tmp_path / "m.npz")])
    assert rc == EXIT_DATA


def test_label_counts_and_idempotence(synth_dir, tmp_path, caplog):
    concepts = tmp_path / "concepts.txt"
    concepts.write_text("concept00\nconcept02\nunicorn\n")
    d = synth_dir / "train"
    assert main(["label", "--dataset", str(d), "--concepts", str(concepts)]) == EXIT_OK
    assert "unicorn" in caplog.text
    first = (d / "labels.jsonl").read_bytes()
    assert main(["label", "--dataset", str(d), "--concepts", str(concepts)]) == EXIT_OK
    assert (d / "labels.jsonl").read_bytes() == first
    # recount oracle straight from the file
    recount = np.zeros(3, int)
    for line in first.decode().splitlines():
        rec = json.loads(line)
        for name, entry in rec.get("positive", {}).items():
            recount[["concept00", "concept02", "unicorn"].index(name)] += entry["y"]
    np.testing.assert_array_equal(load_dataset(d).labels.positive_counts(), recount)
    assert recount[2] == 0


def test_label_requires_metadata(tmp_path, synth_dir):
    d = synth_dir / "train"
    man = json.loads((d / "manifest.json").read_text())
    man["has_metadata"] = False
    (d / "manifest.json").write_text(json.dumps(man))
    (tmp_path / "c.txt").write_text("concept00\n")
    assert main(["label", "--dataset", str(d), "--concepts", str(tmp_path / "c.txt")]) == EXIT_DATA


def test_train_eval_retrieve_consistent(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["train", "--dataset", str(synth_dir / "train"), "--test-dataset", str(synth_dir / "test"),
            "--epochs", "3", "--batch-size", "16", "--out", str(out)]
    assert main(args) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert main(["eval", "--dataset", str(synth_dir / "test"), "--model", report["model"]]) == EXIT_OK
    evaluated = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert evaluated["map"] == report["test"]["map"]

    assert main(["retrieve", "--dataset", str(synth_dir / "test"), "--model", report["model"],
                 "--class", "concept01", "-k", "10"]) == EXIT_OK
    printed = [ln.split("\t") for ln in capsys.readouterr().out.strip().splitlines()]
    params, _ = models.load_model(report["model"])
    expected = evaluation.top_k_retrieval(params, load_dataset(synth_dir / "test"), 1, 10)
    assert [int(r[1]) for r in printed] == [i for i, _ in expected]


def test_train_twice_identical_logs(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg_file), "--modalities", "m0,m1,concat",
                     "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["schema"] == "webly-mmco/metrics/1"


def test_snapshot_reproduces_run(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file), "--p-init", "0.4", "--p-max", "0.8", "--seed", "2",
                 "--voting", "average", "--modalities", "m0,concat", "--out", str(tmp_path / "a")]) == 0
    snap = json.loads((tmp_path / "a" / "config.json").read_text())
    assert snap["train"]["schedule"]["p_init"] == 0.4 and snap["train"]["voting"] == "average"
    assert main(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_two_data_sources_rejected(tmp_path, cfg_file, synth_dir):
    rc = main(["train", "--config", str(cfg_file), "--dataset", str(synth_dir / "train"),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_CONFIG


def test_batch_method(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file), "--method", "batch", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "model_concat.npz").exists()


def test_sweep_and_ablate(tmp_path, cfg_file):
    assert main(["sweep-noise", "--config", str(cfg_file), "--levels", "0.2,0.5", "--seeds", "0",
                 "--threads", "2", "--out", str(tmp_path / "s")]) == EXIT_OK
    assert len((tmp_path / "s" / "noise_sweep.jsonl").read_text().splitlines()) == 4
    assert main(["ablate", "--config", str(cfg_file), "--subsets", "m0;m0,m1",
                 "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["ablate", "--config", str(cfg_file), "--subsets", "zz",
                 "--out", str(tmp_path / "b")]) == EXIT_DATA


def test_check_command(tmp_path):
    assert main(["check", "--out", str(tmp_path)]) == EXIT_OK
    res = json.loads((tmp_path / "check.json").read_text())
    assert res["passed"]


def test_run_checks_small():
    res = run_checks(seed=1, n_instances=5, n_weights=50)
    assert res["passed"] and res["grad_mlp"] <= 1e-5
