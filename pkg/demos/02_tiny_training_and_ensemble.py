"""
Training tiny backbones and fusing them
=======================================

The tiny variants are small, randomly initialised stand-ins for the four
pretrained families.  Each one is trained on the 40-image synthetic set,
then their feature extractors are frozen and concatenated into the
ensemble, which only trains its dense head.
"""

import time

import numpy as np

from ctkidney import (
    ArrayStream,
    AugmentationConfig,
    BackboneSpec,
    EnsembleSpec,
    TrainingConfig,
    attach_head,
    build_backbone,
    build_ensemble,
    ensemble_forward,
    train,
    train_ensemble,
)
from ctkidney.fixture import synthetic_arrays
from ctkidney.models import FAMILIES

x, y = synthetic_arrays(n_per_class=10, size=64, seed=0)
aug = AugmentationConfig(target_size=(64, 64))
cfg = TrainingConfig(epochs=8, batch_size=8, patience=8, seed=0)


def streams():
    return ArrayStream(x, y, 8, shuffle=True, seed=0, augment_cfg=aug), ArrayStream(x, y, 8)


extractors = []
for family in FAMILIES:
    t0 = time.perf_counter()
    spec = BackboneSpec(family, "tiny_random", (64, 64), seed=0)
    # tiny nets start from random weights, so every stage is trainable here
    model = attach_head(build_backbone(spec), num_classes=4, freeze="full")
    model, hist = train(model, *streams(), cfg)
    accs = [round(r.train_acc, 2) for r in hist.records]
    print(f"{family:16s} train_acc {accs}  best epoch {hist.best_epoch}  {time.perf_counter() - t0:.1f}s")
    extractors.append(model.extractor)

ens = build_ensemble(extractors, EnsembleSpec(tuple(e.spec for e in extractors)))
print("fused width", ens.spec.fused_dim, "offsets", ens.spec.offsets)

ens, hist = train_ensemble(ens, *streams(), cfg)
print("ensemble train_acc", [round(r.train_acc, 2) for r in hist.records])

probs = ensemble_forward(ens, x[::10])
print(np.round(probs, 3))
print("predicted", probs.argmax(1), "true", y[::10])
