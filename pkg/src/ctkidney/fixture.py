"""Synthetic class-coloured noise dataset used for smoke runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

CLASSES = ("Cyst", "Normal", "Stone", "Tumor")
# mean RGB per class; noise sd 0.15 keeps classes overlapping pixel-wise
CLASS_COLOURS = {
    "Cyst": (0.75, 0.30, 0.30),
    "Normal": (0.45, 0.45, 0.45),
    "Stone": (0.30, 0.70, 0.35),
    "Tumor": (0.30, 0.35, 0.75),
}


def synthetic_arrays(n_per_class: int = 10, size: int = 64, seed: int = 0,
                     classes: Sequence[str] = CLASSES) -> Tuple[np.ndarray, np.ndarray]:
    """Images ``(N, size, size, 3)`` in [0, 1] and integer labels, class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for ci, name in enumerate(classes):
        colour = np.asarray(CLASS_COLOURS.get(name, rng.uniform(0.2, 0.8, 3)), dtype=np.float64)
        for _ in range(n_per_class):
            img = colour + rng.normal(0.0, 0.15, size=(size, size, 3))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(ci)
    # quantise exactly like a PNG round trip so arrays match files on disk
    images = np.round(np.stack(images) * 255.0) / 255.0
    return images.astype(np.float32), np.asarray(labels, dtype=np.int64)


def make_fixture(root, n_per_class: int = 10, size: int = 64, seed: int = 0,
                 classes: Sequence[str] = CLASSES) -> Path:
    """Write the dataset as ``root/<class>/img_XXX.png``; returns ``root``."""
    root = Path(root)
    images, labels = synthetic_arrays(n_per_class, size, seed, classes)
    counters = {c: 0 for c in classes}
    for img, li in zip(images, labels):
        name = classes[li]
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(d / f"img_{counters[name]:03d}.png")
        counters[name] += 1
    return root
