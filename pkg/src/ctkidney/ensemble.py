"""Feature-concatenation ensemble over several backbone branches.

One input image fans out to every branch; the pooled feature vectors are
concatenated in branch order and classified by a dense stack ending in a
softmax layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimMismatch, ShapeMismatch
from .models import (
    BackboneSpec,
    FeatureExtractor,
    build_backbone,
    load_checkpoint,
    predict_proba,
    sha256_file,
)
from .training import TrainingConfig, train

ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "sigmoid": nn.Sigmoid}


@dataclass(frozen=True)
class EnsembleSpec:
    branches: Tuple[BackboneSpec, ...]
    num_classes: int = 4
    dense_widths: Tuple[int, ...] = (512, 128)
    branch_trainable: bool = False
    activation: str = "tanh"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if len(self.branches) < 2:
            raise ConfigError("an ensemble needs at least two branches")
        sizes = {b.input_size for b in self.branches}
        if len(sizes) != 1:
            raise ConfigError(f"all branches must share one input_size, got {sorted(sizes)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def fused_dim(self) -> int:
        return sum(b.feature_dim for b in self.branches)

    @property
    def input_size(self) -> Tuple[int, int]:
        return self.branches[0].input_size

    @property
    def offsets(self) -> List[int]:
        out, acc = [], 0
        for b in self.branches:
            out.append(acc)
            acc += b.feature_dim
        return out

    def to_dict(self) -> dict:
        return {
            "branches": [b.to_dict() for b in self.branches],
            "num_classes": self.num_classes,
            "dense_widths": list(self.dense_widths),
            "branch_trainable": self.branch_trainable,
            "activation": self.activation,
            "dropout": self.dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ensemble keys: {sorted(unknown)}")
        d = dict(d)
        d["branches"] = tuple(BackboneSpec.from_dict(b) for b in d.get("branches", ()))
        if "dense_widths" in d:
            d["dense_widths"] = tuple(d["dense_widths"])
        return cls(**d)


class EnsembleModel(nn.Module):
    def __init__(self, branches: Sequence[FeatureExtractor], spec: EnsembleSpec):
        super().__init__()
        self.spec = spec
        self.branches = nn.ModuleList(branches)
        act = ACTIVATIONS[spec.activation]
        layers: List[nn.Module] = []
        width = spec.fused_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            for w in spec.dense_widths:
                layers += [nn.Linear(width, w), act()]
                if spec.dropout:
                    layers.append(nn.Dropout(spec.dropout))
                width = w
            layers.append(nn.Linear(width, spec.num_classes))
        self.head = nn.Sequential(*layers)
        self.set_branch_trainable(spec.branch_trainable)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def set_branch_trainable(self, flag: bool) -> None:
        for p in self.branches.parameters():
            p.requires_grad_(flag)

    def branch_features(self, x) -> List[torch.Tensor]:
        return [b(x) for b in self.branches]

    def fused_features(self, x) -> torch.Tensor:
        return torch.cat(self.branch_features(x), dim=1)

    def logits(self, x):
        return self.head(self.fused_features(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=-1)


def build_ensemble(branches: Sequence[FeatureExtractor], spec: EnsembleSpec) -> EnsembleModel:
    if len(branches) != len(spec.branches):
        raise DimMismatch(f"{len(branches)} extractors for {len(spec.branches)} branch specs")
    for i, (b, s) in enumerate(zip(branches, spec.branches)):
        if b.feature_dim != s.feature_dim:
            raise DimMismatch(f"branch {i} ({s.family}) emits {b.feature_dim} features, spec says {s.feature_dim}")
        if b.spec.input_size != spec.input_size:
            raise DimMismatch(f"branch {i} expects input {b.spec.input_size}, ensemble uses {spec.input_size}")
    return EnsembleModel(branches, spec)


def ensemble_forward(model: EnsembleModel, batch) -> np.ndarray:
    x = batch if isinstance(batch, torch.Tensor) else np.asarray(batch)
    if x.ndim != 4 or tuple(x.shape[1:3]) != model.spec.input_size or x.shape[-1] != 3:
        raise ShapeMismatch(f"expected (batch, {model.spec.input_size[0]}, {model.spec.input_size[1]}, 3), got {tuple(x.shape)}")
    return predict_proba(model, batch)


def train_ensemble(model: EnsembleModel, train_stream, val_stream, cfg: TrainingConfig,
                   checkpoint_dir=None, checkpoint_fn=None):
    """Train the fusion head (and the branches when ``branch_trainable``)."""
    model.set_branch_trainable(model.spec.branch_trainable)
    return train(model, train_stream, val_stream, cfg, checkpoint_dir=checkpoint_dir, checkpoint_fn=checkpoint_fn)


def branches_from_checkpoints(paths: Sequence) -> List[FeatureExtractor]:
    """Take the feature extractor out of each per-backbone best checkpoint."""
    return [load_checkpoint(p)[0].extractor for p in paths]


def topology(model: EnsembleModel, branch_refs: Optional[Sequence[dict]] = None) -> dict:
    spec = model.spec
    return {
        "branches": [
            {"family": b.family, "variant": b.variant, "feature_dim": b.feature_dim,
             "offset": off, "preprocessing_id": b.preprocessing_id}
            for b, off in zip(spec.branches, spec.offsets)
        ],
        "fused_dim": spec.fused_dim,
        "dense_widths": list(spec.dense_widths),
        "activation": spec.activation,
        "num_classes": spec.num_classes,
        "branch_trainable": spec.branch_trainable,
        "branch_refs": list(branch_refs or []),
    }


def save_ensemble_checkpoint(path, model: EnsembleModel, classes: Sequence[str],
                             branch_paths: Sequence = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    refs = [{"path": Path(p).as_posix(), "sha256": sha256_file(p)} for p in branch_paths]
    torch.save(
        {
            "kind": "ensemble",
            "spec": model.spec.to_dict(),
            "classes": list(classes),
            "branch_refs": refs,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_ensemble_checkpoint(path) -> Tuple[EnsembleModel, Tuple[str, ...]]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "ensemble":
        raise ConfigError(f"{path} is not an ensemble checkpoint")
    spec = EnsembleSpec.from_dict(blob["spec"])
    branches = [build_backbone(b, load_weights=False) for b in spec.branches]
    model = build_ensemble(branches, spec)
    model.load_state_dict(blob["state_dict"])
    return model, tuple(blob["classes"])


def write_topology(path, model: EnsembleModel, branch_refs=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(topology(model, branch_refs), indent=2) + "\n")
    return path
