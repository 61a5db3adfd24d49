"""Run configuration: one JSON file describing a whole experiment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

from .augment import AugmentationConfig
from .ensemble import EnsembleSpec
from .errors import ConfigError
from .lime import LimeConfig
from .models import FAMILIES, FREEZE_POLICIES, VARIANTS, BackboneSpec
from .training import TrainingConfig

ENSEMBLE_OPTIONS = ("dense_widths", "branch_trainable", "activation", "dropout")
BACKBONE_OPTIONS = ("reference_arch", "preprocessing_id", "norm_mean", "norm_std", "feature_dim")


@dataclass
class RunConfig:
    """Experiment settings.

    ``seed`` is the master seed: it drives the split, stream shuffling,
    augmentation, model initialisation and the training loop, overriding
    any ``training.seed`` in the file.
    """

    dataset_root: Optional[str] = None
    output_dir: str = "out"
    seed: int = 0
    train_fraction: float = 0.8
    variant: str = "full_pretrained"
    freeze: str = "head_and_last_stage"
    weights_dir: str = "weights"
    backbones: Tuple[str, ...] = FAMILIES
    # per-family overrides, e.g. {"inception_v2": {"reference_arch": "inception_v3"}}
    backbone_options: dict = field(default_factory=dict)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ensemble: dict = field(default_factory=lambda: {"dense_widths": [512, 128], "branch_trainable": False,
                                                    "activation": "tanh", "dropout": 0.0})
    lime: LimeConfig = field(default_factory=LimeConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.freeze not in FREEZE_POLICIES:
            raise ConfigError(f"freeze must be one of {FREEZE_POLICIES}")
        self.backbones = tuple(self.backbones)
        bad = [b for b in self.backbones if b not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown backbone families {bad}")
        for fam, opts in self.backbone_options.items():
            if fam not in FAMILIES:
                raise ConfigError(f"backbone_options: unknown family {fam!r}")
            bad_keys = set(opts) - set(BACKBONE_OPTIONS)
            if bad_keys:
                raise ConfigError(f"backbone_options[{fam}]: unknown keys {sorted(bad_keys)}")
        unknown = set(self.ensemble) - set(ENSEMBLE_OPTIONS)
        if unknown:
            raise ConfigError(f"unknown ensemble keys: {sorted(unknown)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        self.training = replace(self.training, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "augmentation" in d:
            d["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
        if "training" in d:
            d["training"] = TrainingConfig.from_dict(d["training"])
        if "lime" in d:
            d["lime"] = LimeConfig.from_dict(d["lime"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "variant": self.variant,
            "freeze": self.freeze,
            "weights_dir": self.weights_dir,
            "backbones": list(self.backbones),
            "backbone_options": {k: dict(v) for k, v in sorted(self.backbone_options.items())},
            "augmentation": self.augmentation.to_dict(),
            "training": self.training.to_dict(),
            "ensemble": dict(self.ensemble),
            "lime": {k: getattr(self.lime, k) for k in self.lime.__dataclass_fields__},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if not kw:
            return self
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    def backbone_spec(self, family: str) -> BackboneSpec:
        opts = dict(self.backbone_options.get(family, {}))
        for key in ("norm_mean", "norm_std"):
            if key in opts:
                opts[key] = tuple(opts[key])
        return BackboneSpec(family, self.variant, self.augmentation.target_size, seed=self.seed, **opts)

    def ensemble_spec(self, branches: List[BackboneSpec], num_classes: int) -> EnsembleSpec:
        opts = dict(self.ensemble)
        if "dense_widths" in opts:
            opts["dense_widths"] = tuple(opts["dense_widths"])
        return EnsembleSpec(tuple(branches), num_classes=num_classes, seed=self.seed, **opts)
