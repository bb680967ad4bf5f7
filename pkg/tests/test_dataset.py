import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from webly_mmco.dataset import (CONCAT, DatasetFormatError, ModalityDescriptor, MultimodalDataset,
                                SynthConfig, load_dataset, make_concat_modality, minibatch_iterator,
                                save_dataset, synth_generate)
from webly_mmco.pseudolabel import PseudoLabelMatrix


def _toy(n=4, with_gt=True, with_meta=True):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, 2)).astype(np.float32).astype(np.float64)
    b = rng.standard_normal((n, 3)).astype(np.float32).astype(np.float64)
    meta = (ModalityDescriptor("A", 2), ModalityDescriptor("B", 3, "train-only"))
    gt = (rng.random((n, 2)) < 0.5).astype(np.uint8) if with_gt else None
    texts = tuple(f"sample {i}" for i in range(n)) if with_meta else None
    return MultimodalDataset(meta, {"A": a, "B": b}, ("x", "y"), texts, gt)


def test_round_trip(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    assert load_dataset(tmp_path).equals(d)


def test_round_trip_without_metadata(tmp_path):
    d = _toy(with_meta=False)
    save_dataset(d, tmp_path)
    back = load_dataset(tmp_path)
    assert back.metadata is None
    assert not (tmp_path / "metadata.jsonl").exists()
    assert back.equals(d)


def test_round_trip_ground_truth(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    np.testing.assert_array_equal(load_dataset(tmp_path).ground_truth, d.ground_truth)


def test_empty_dataset(tmp_path):
    d = _toy(n=0)
    save_dataset(d, tmp_path)
    back = load_dataset(tmp_path)
    assert back.n_samples == 0
    assert (tmp_path / "features_A.f32").stat().st_size == 0


def test_synthetic_round_trip_is_bit_exact(tmp_path):
    d = synth_generate(SynthConfig(n_classes=3, n_per_class=20, n_background=30, seed=4))
    save_dataset(d, tmp_path)
    back = load_dataset(tmp_path)
    for name in d.modality_names:
        assert d.features[name].tobytes() == back.features[name].tobytes()
    assert back.labels.equals(d.labels)
    np.testing.assert_array_equal(back.provenance["hard_modality"], d.provenance["hard_modality"])


def test_dim_mismatch_is_format_error(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    # 7 floats per row for a modality declared with dim 8
    man = (tmp_path / "manifest.json").read_text().replace('"dim": 2', '"dim": 8')
    (tmp_path / "manifest.json").write_text(man)
    np.zeros((4, 7), dtype="<f4").tofile(tmp_path / "features_A.f32")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path)


def test_row_count_mismatch_names_both_counts(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    np.zeros((5, 2), dtype="<f4").tofile(tmp_path / "features_A.f32")
    with pytest.raises(DatasetFormatError, match=r"5 rows.*declares 4"):
        load_dataset(tmp_path)


def test_missing_file_names_it(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    (tmp_path / "features_B.f32").unlink()
    with pytest.raises(FileNotFoundError, match="features_B.f32"):
        load_dataset(tmp_path)


def test_non_finite_reports_sample(tmp_path):
    d = _toy()
    save_dataset(d, tmp_path)
    x = np.zeros((4, 2), dtype="<f4")
    x[2, 1] = np.nan
    x.tofile(tmp_path / "features_A.f32")
    with pytest.raises(DatasetFormatError, match="sample 2"):
        load_dataset(tmp_path)


def test_in_memory_row_mismatch_rejected():
    with pytest.raises(DatasetFormatError):
        MultimodalDataset((ModalityDescriptor("A", 1), ModalityDescriptor("B", 1)),
                          {"A": np.zeros((3, 1)), "B": np.zeros((2, 1))}, ("x",))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 12), dims=st.lists(st.integers(1, 5), min_size=1, max_size=3),
       c=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, n, dims, c, seed):
    rng = np.random.default_rng(seed)
    meta = tuple(ModalityDescriptor(f"m{i}", d) for i, d in enumerate(dims))
    feats = {m.name: rng.standard_normal((n, m.dim)).astype(np.float32).astype(np.float64) for m in meta}
    counts = rng.integers(0, 3, size=(n, c))
    d = MultimodalDataset(meta, feats, tuple(f"c{i}" for i in range(c)),
                          tuple(f"t{i}" for i in range(n)),
                          (rng.random((n, c)) < 0.3).astype(np.uint8),
                          PseudoLabelMatrix.from_counts(counts))
    path = tmp_path_factory.mktemp("rt")
    save_dataset(d, path)
    assert load_dataset(path).equals(d)


# -- concat ---------------------------------------------------------------

def test_concat_definition():
    d = make_concat_modality(_toy(), ["A", "B"])
    assert d.modality(CONCAT).dim == 5
    np.testing.assert_array_equal(d.features[CONCAT][1], np.r_[d.features["A"][1], d.features["B"][1]])


def test_concat_single_member_is_identity():
    d = make_concat_modality(_toy(), ["A"])
    np.testing.assert_array_equal(d.features[CONCAT], d.features["A"])


def test_concat_order_as_given():
    d = make_concat_modality(_toy(), ["B", "A"])
    np.testing.assert_array_equal(d.features[CONCAT][0], np.r_[d.features["B"][0], d.features["A"][0]])


def test_concat_errors():
    d = _toy()
    with pytest.raises(ValueError):
        make_concat_modality(d, ["A", "Z"])
    with pytest.raises(ValueError):
        make_concat_modality(make_concat_modality(d, ["A"]), ["B"])
    with pytest.raises(ValueError):
        make_concat_modality(d, [])


# -- generator ------------------------------------------------------------

def test_no_noise_ground_truth_matches_pseudo_labels():
    d = synth_generate(SynthConfig(n_classes=3, n_per_class=30, n_background=20, noise_level=0.0))
    np.testing.assert_array_equal(d.ground_truth, d.labels.labels)


def test_false_positive_count():
    cfg = SynthConfig(n_classes=4, n_per_class=100, n_background=50, noise_level=0.5, seed=9)
    d = synth_generate(cfg)
    pos, gt = d.labels.labels == 1, d.ground_truth == 1
    fp_per_class = (pos & ~gt).sum(axis=0)
    np.testing.assert_array_equal(fp_per_class, [50] * 4)
    assert d.n_samples == 4 * 100 + 50


@pytest.mark.parametrize("noise", [0.0, 0.13, 0.5, 0.77, 0.9])
def test_sample_and_fp_counts(noise):
    cfg = SynthConfig(n_classes=3, n_per_class=37, n_background=11, noise_level=noise)
    d = synth_generate(cfg)
    assert d.n_samples == 3 * 37 + 11
    fp = ((d.labels.labels == 1) & (d.ground_truth == 0)).sum(axis=0)
    assert (fp == math.floor(noise * 37)).all()


def test_generator_is_deterministic():
    cfg = SynthConfig(n_classes=2, n_per_class=15, n_background=10, seed=123)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert a.equals(b)
    for m in a.modality_names:
        assert a.features[m].tobytes() == b.features[m].tobytes()


def test_hard_modality_bookkeeping():
    cfg = SynthConfig(n_classes=3, n_per_class=200, n_background=300, modality_dims=(6, 6, 6),
                      noise_level=0.25, hard_fraction=0.4, class_separation=50.0, seed=2)
    d = synth_generate(cfg)
    prov = d.provenance
    hard = prov["hard_modality"]
    tp = (prov["class_id"] >= 0) & ~prov["is_false_positive"]
    # only true positives are hard, and the hard count matches the fraction
    assert (hard[~tp] == -1).all()
    assert (hard >= 0).sum() == round(0.4 * tp.sum())
    # with a huge separation, a modality is near its class centre iff it was not corrupted
    for m in range(3):
        norm = np.linalg.norm(d.features[f"m{m}"], axis=1)
        far = norm > 25
        np.testing.assert_array_equal(far, tp & (hard != m))
    # exactly one corrupted modality per hard sample
    n_far = sum((np.linalg.norm(d.features[f"m{m}"], axis=1) > 25).astype(int) for m in range(3))
    assert (n_far[hard >= 0] == 2).all()


def test_generator_metadata_reproduces_labels():
    from webly_mmco.pseudolabel import label_dataset
    d = synth_generate(SynthConfig(n_classes=3, n_per_class=10, n_background=5))
    assert label_dataset(d, d.class_names).equals(d.labels)


def test_test_split_is_clean():
    cfg = SynthConfig(n_classes=3, n_per_class=20, n_background=10, noise_level=0.6)
    d = synth_generate(cfg, "test")
    assert d.ground_truth.sum() == 60
    assert not d.provenance["is_false_positive"].any()


@pytest.mark.parametrize("kwargs", [dict(noise_level=1.0), dict(noise_level=-0.1), dict(hard_fraction=1.5),
                                    dict(modality_dims=(3, 0)), dict(n_classes=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


# -- minibatches ----------------------------------------------------------

def test_minibatch_partition():
    batches = list(minibatch_iterator(10, 3, seed=0, epoch=0))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_single_batch():
    (b,) = list(minibatch_iterator(7, 7, seed=1, epoch=2))
    assert sorted(b.tolist()) == list(range(7))


def test_minibatch_determinism():
    a = [b.tolist() for b in minibatch_iterator(50, 8, seed=3, epoch=4)]
    b = [b.tolist() for b in minibatch_iterator(50, 8, seed=3, epoch=4)]
    c = [b.tolist() for b in minibatch_iterator(50, 8, seed=3, epoch=5)]
    assert a == b
    assert a != c


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 200), bs=st.integers(1, 64), seed=st.integers(0, 10**6), epoch=st.integers(0, 100))
def test_minibatch_covers_each_index_once(n, bs, seed, epoch):
    idx = [i for b in minibatch_iterator(n, bs, seed, epoch) for i in b.tolist()]
    assert sorted(idx) == list(range(n))
