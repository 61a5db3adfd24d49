"""
Explaining one prediction with LIME
===================================

A tiny MobileNet is trained on the synthetic set so that it has something
to explain.  One image is cut into a grid of superpixels, perturbed a few
hundred times, and a weighted ridge fit scores each superpixel.  The top
positive segments are tinted yellow in the overlay.
"""

import tempfile
from pathlib import Path

import numpy as np

from ctkidney import ArrayStream, BackboneSpec, LimeConfig, TrainingConfig, attach_head, build_backbone, explain, train
from ctkidney.fixture import synthetic_arrays
from ctkidney.lime import render_overlay, write_explanation

x, y = synthetic_arrays(n_per_class=10, size=64, seed=0)
model = attach_head(build_backbone(BackboneSpec("mobilenet_v2", "tiny_random", (64, 64))), 4, freeze="full")
model, _ = train(model, ArrayStream(x, y, 8, shuffle=True), ArrayStream(x, y, 8),
                 TrainingConfig(epochs=6, batch_size=8, patience=6))

# paint a green Stone-coloured patch onto a Normal image, then ask what
# pushes the model towards Stone
img = x[15].copy()
img[8:24, 8:24] = [0.30, 0.70, 0.35]

cfg = LimeConfig(n_segments=16, n_samples=300, seed=0)
result = explain(model, img, target_class=2, cfg=cfg)
print("segments:", result.superpixels.n_segments, "r2:", round(result.local_fidelity_r2, 3))
print("top segments:", [(s, round(w, 4)) for s, w in result.top_k])
print("low fidelity?", result.low_fidelity)
print("segments under the patch:", np.unique(result.superpixels.labels[8:24, 8:24]).tolist())

overlay = render_overlay(img, result.superpixels, result, top_k=3)
changed = np.any(overlay != img, axis=-1)
print("pixels highlighted:", int(changed.sum()), "of", changed.size)

out = Path(tempfile.mkdtemp())
js, png = write_explanation(out, result, overlay)
print("wrote", js, png)
