import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from webly_mmco.dataset import SynthConfig
from webly_mmco.evaluation import (UndefinedMetricError, average_precision, easiness_buckets,
                                   easiness_scores, easiness_split_report, first_cap_epoch,
                                   format_table, hard_example_experiment, mean_average_precision,
                                   modality_ablation, precision_at_k, selection_metrics,
                                   summarize, synth_pair, top_k_retrieval, write_jsonl, write_tsv)
from webly_mmco.selfpaced import AgeSchedule
from webly_mmco.training import TrainConfig, train_online_well


def _brute_ap(rel_in_rank_order):
    hits, terms = 0, []
    for i, r in enumerate(rel_in_rank_order, 1):
        if r:
            hits += 1
            terms.append(hits / i)
    return math.fsum(terms) / hits


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0.1, 0.2, 0.3], [1, 1, 1]) == 1.0


def test_ap_no_relevant():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_ties_broken_by_index():
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_exhaustive_small():
    for n in range(1, 7):
        for rel in itertools.product((0, 1), repeat=n):
            if any(rel):
                scores = np.arange(n, 0, -1, dtype=float)
                assert average_precision(scores, rel) == _brute_ap(rel)


@given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=1, max_size=30))
def test_ap_in_unit_interval(items):
    scores, rel = zip(*items)
    if any(rel):
        assert 0 < average_precision(scores, rel) <= 1


def test_precision_at_k():
    assert precision_at_k([0.9, 0.1, 0.5], [1, 0, 0], 2) == 0.5
    with pytest.raises(ValueError):
        precision_at_k([0.1], [1], 2)


def test_map_skips_empty_classes():
    s = np.array([[0.9, 0.1], [0.1, 0.2]])
    t = np.array([[1, 0], [0, 0]])
    assert mean_average_precision(s, t) == 1.0


def test_selection_metrics_by_hand():
    losses = np.array([[0.1], [0.2], [0.9], [0.3], [0.05]])
    labels = np.array([[1], [1], [1], [1], [0]])
    gt = np.array([[1], [0], [1], [1], [0]])
    rep = selection_metrics(losses, [0.25], labels, gt)
    assert rep.precision == 0.5 and rep.recall == pytest.approx(1 / 3)
    # ascending loss order of positives: 0.1 (tp), 0.2 (fp), 0.3 (tp), 0.9 (tp)
    assert rep.ap == pytest.approx((1 + 2 / 3 + 3 / 4) / 3)


def test_empty_selection_flagged():
    rep = selection_metrics(np.array([[1.0]]), [0.5], np.array([[1]]), np.array([[1]]))
    assert rep.precision == 1.0 and rep.recall == 0.0 and rep.empty_selection_classes == [0]


def test_buckets_partition():
    rng = np.random.default_rng(0)
    ease = rng.random((23, 2))
    labels = (rng.random((23, 2)) < 0.7).astype(int)
    parts = easiness_buckets(ease, labels)
    for c, split in parts.items():
        all_idx = np.concatenate([split[b] for b in ("easy", "normal", "hard")])
        assert sorted(all_idx.tolist()) == np.flatnonzero(labels[:, c]).tolist()
        n = labels[:, c].sum()
        assert len(split["easy"]) == len(split["hard"]) == math.floor(0.3 * n + 0.5)
        if len(split["hard"]):
            assert ease[split["easy"], c].min() >= ease[split["hard"], c].max()


def test_easiness_report_recall():
    ease = np.array([[0.9], [0.8], [0.5], [0.4], [0.1]])
    labels = np.ones((5, 1), int)
    gt = np.ones((5, 1), int)
    losses = np.array([[0.1], [0.1], [0.1], [0.9], [0.9]])
    rep = easiness_split_report(ease, losses, [0.5], labels, gt)
    assert rep.buckets["easy"]["recall"] == 1.0
    assert rep.buckets["hard"]["recall"] == 0.0


@pytest.fixture(scope="module")
def pair():
    return synth_pair(SynthConfig(n_classes=2, n_per_class=40, n_background=40, modality_dims=(3, 5),
                                  seed=3))


def _cfg(**kw):
    return TrainConfig(batch_size=16, epochs=4, lr=1e-2,
                       schedule=AgeSchedule(step_every_epochs=1, p_step=0.1, p_max=0.5), **kw)


def test_first_cap_epoch():
    assert first_cap_epoch(_cfg()) == 2
    assert first_cap_epoch(TrainConfig()) == 30
    assert first_cap_epoch(TrainConfig(epochs=10)) == 9


def test_easiness_auxiliary_uses_top_fraction(pair):
    train, _ = pair
    ease = easiness_scores(train, None, _cfg())
    pos = train.labels.labels == 1
    assert np.isnan(ease[~pos]).all() and np.isfinite(ease[pos]).all()


def test_retrieval(pair):
    train, test = pair
    st = train_online_well(train, None, _cfg())
    top = top_k_retrieval(st.test_params, test, 0, 5)
    assert len(top) == 5 and all(a[1] >= b[1] for a, b in zip(top, top[1:]))
    with pytest.raises(ValueError):
        top_k_retrieval(st.test_params, test, 0, test.n_samples + 1)


def test_hard_example_rows(pair):
    rows = hard_example_experiment(SynthConfig(n_classes=2, n_per_class=40, n_background=40,
                                               modality_dims=(3, 5)), _cfg(), seeds=[0])
    assert [r["method"] for r in rows] == ["baseline", "mmco-max"]
    for r in rows:
        assert 0 <= r["sel_precision"] <= 1 and 0 <= r["hard_recall"] <= 1
        assert 0 <= r["final_sel_recall"] <= 1


def test_ablation(pair):
    train, test = pair
    rows = modality_ablation(train, test, [["m0"], ["m0", "m1"]], _cfg())
    assert [r["subset"] for r in rows] == ["m0", "m0+m1"]
    with pytest.raises(ValueError):
        modality_ablation(train, test, [["zz"]], _cfg())


def test_summary_and_output(tmp_path):
    rows = [{"g": "a", "x": 1.0}, {"g": "a", "x": 3.0}, {"g": "b", "x": 2.0}]
    s = summarize(rows, ["g"], ["x"])
    assert s[0]["x_mean"] == 2.0 and s[1]["n"] == 1
    assert "a" in format_table(s)
    write_jsonl(rows, tmp_path / "r.jsonl")
    write_tsv(rows, tmp_path / "r.tsv")
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 3
    assert (tmp_path / "r.tsv").read_text().splitlines()[0].split("\t") == ["g", "x"]
