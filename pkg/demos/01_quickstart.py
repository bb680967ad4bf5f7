"""Quickstart: generate noisy multimodal data, label it from metadata, train with and without MMCo.

Run from the repository root:  python demos/01_quickstart.py
"""
from dataclasses import replace

import numpy as np

from webly_mmco import SynthConfig, TrainConfig, label_dataset, train_mmco, train_online_well
from webly_mmco.evaluation import synth_pair, test_metrics

# Three views per sample. The third is "train-only": a stand-in for a
# metadata-derived feature the deployed classifier is not allowed to read.
syn = SynthConfig(n_classes=5, n_per_class=300, n_background=1000, modality_dims=(8, 128, 8),
                  noise_level=0.5, class_separation=2.0, train_only=(2,), seed=0)
train, test = synth_pair(syn)
print("train samples:", train.n_samples, "modalities:", train.modality_names)

# Pseudo labels come from matching class names against each sample's text.
labels = label_dataset(train, train.class_names)
print("positives per class:", labels.positive_counts())
fp = (labels.labels == 1) & (train.ground_truth == 0)
print("fraction of positives that are wrong: %.2f" % (fp.sum() / labels.labels.sum()))
print("example text:", repr(train.metadata[0]))

# Baseline: self-paced training on the concat view alone.
cfg = TrainConfig(epochs=40, lr=1e-2)
base = train_online_well(train, labels, cfg)

# MMCo: every view gets a classifier; their max-voted score decides the shared weights.
mm_cfg = replace(cfg, train_modalities=tuple(train.modality_names))
mm = train_mmco(train, labels, mm_cfg)

for name, st in (("baseline", base), ("mmco-max", mm)):
    m = test_metrics(st.test_params, test)
    print(f"{name:9s} test mAP {m['map']:.3f}  prec@10 {m['prec@10']:.3f}  prec@100 {m['prec@100']:.3f}")

# the age schedule: per-class lambda summary over the last few epochs
for rep in mm.reports[-3:]:
    print("epoch", rep.epoch, "p", rep.p, "lambda median %.3f" % rep.lambda_summary["median"])
print("mean final loss per view:", {k: round(v, 4) for k, v in mm.reports[-1].mean_loss.items()})
print("weights are shared, so every view saw the same selection:", np.isfinite(mm.age.lambdas).all())
