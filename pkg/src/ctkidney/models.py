"""Backbone feature extractors and the softmax classification head.

Two variants exist per family.  ``full_pretrained`` is the torchvision
reference network initialised from a local weight store (no network
access from the library).  ``tiny_random`` is a width/depth-reduced
same-family network with seeded random init and a 64-wide feature vector,
used wherever pretrained weights are unavailable (CI, desk-scale checks).

All extractors take raw ``(batch, H, W, 3)`` intensities in ``[0, 1]`` and
apply their family's normalisation internally.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatch, UnsupportedInputSize, WeightsUnavailable

FAMILIES = ("efficientnet_v2", "inception_v2", "mobilenet_v2", "vit_b16")
VARIANTS = ("full_pretrained", "tiny_random")
FREEZE_POLICIES = ("head_only", "head_and_last_stage", "full")
TINY_FEATURE_DIM = 64

# Reference architectures for full_pretrained builds.  The inception family
# token resolves to the InceptionV3 lineage by default.
REFERENCE_ARCH = {
    "efficientnet_v2": {"arch": "efficientnet_v2_s", "feature_dim": 1280, "preprocessing": "imagenet"},
    "inception_v2": {"arch": "inception_v3", "feature_dim": 2048, "preprocessing": "inception"},
    "mobilenet_v2": {"arch": "mobilenet_v2", "feature_dim": 1280, "preprocessing": "imagenet"},
    "vit_b16": {"arch": "vit_b_16", "feature_dim": 768, "preprocessing": "imagenet", "patch": 16},
}

PREPROCESSING = {
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "inception": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "identity": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
}

VIT_PATCH = 16


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    variant: str = "tiny_random"
    input_size: Tuple[int, int] = (224, 224)
    feature_dim: int = 0  # 0 -> taken from the reference table
    preprocessing_id: str = ""
    norm_mean: Tuple[float, ...] = ()
    norm_std: Tuple[float, ...] = ()
    reference_arch: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}; choose from {FAMILIES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        ref = REFERENCE_ARCH[self.family]
        size = tuple(int(s) for s in self.input_size)
        object.__setattr__(self, "input_size", size)
        if not self.feature_dim:
            dim = TINY_FEATURE_DIM if self.variant == "tiny_random" else ref["feature_dim"]
            object.__setattr__(self, "feature_dim", dim)
        if not self.preprocessing_id:
            object.__setattr__(self, "preprocessing_id", ref["preprocessing"])
        if self.preprocessing_id not in PREPROCESSING and not (self.norm_mean and self.norm_std):
            raise ConfigError(f"unknown preprocessing {self.preprocessing_id!r}")
        mean, std = PREPROCESSING.get(self.preprocessing_id, ((), ()))
        object.__setattr__(self, "norm_mean", tuple(self.norm_mean or mean))
        object.__setattr__(self, "norm_std", tuple(self.norm_std or std))
        if not self.reference_arch:
            object.__setattr__(self, "reference_arch", ref["arch"])
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.family == "vit_b16" and (size[0] % VIT_PATCH or size[1] % VIT_PATCH):
            raise UnsupportedInputSize(
                f"vit_b16 needs input sides divisible by {VIT_PATCH}, got {size[0]}x{size[1]}"
            )

    @property
    def num_patches(self) -> Optional[int]:
        if self.family != "vit_b16":
            return None
        return (self.input_size[0] // VIT_PATCH) * (self.input_size[1] // VIT_PATCH)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_size", "norm_mean", "norm_std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("input_size", "norm_mean", "norm_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------------------
# tiny_random architectures
# --------------------------------------------------------------------------

def _norm(ch: int) -> nn.GroupNorm:
    # GroupNorm keeps outputs independent of batch composition and has no
    # running statistics, so a zero learning rate leaves the model unchanged.
    return nn.GroupNorm(min(4, ch), ch)


def _conv(cin, cout, k=3, stride=1, groups=1, act=nn.ReLU6):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False), _norm(cout)]
    if act is not None:
        layers.append(act())
    return nn.Sequential(*layers)


class InvertedResidual(nn.Module):
    """Expand (1x1) -> depthwise 3x3 -> linear 1x1 projection."""

    def __init__(self, cin, cout, stride, expand=4, act=nn.ReLU6):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            _conv(cin, mid, 1, act=act),
            _conv(mid, mid, 3, stride, groups=mid, act=act),
            _conv(mid, cout, 1, act=None),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class SqueezeExcite(nn.Module):
    def __init__(self, ch, reduced):
        super().__init__()
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Conv2d(ch, reduced, 1), nn.SiLU(),
            nn.Conv2d(reduced, ch, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.fc(x)


class FusedMBConv(nn.Module):
    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(_conv(cin, mid, 3, stride, act=nn.SiLU), _conv(mid, cout, 1, act=None))

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class MBConv(nn.Module):
    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            _conv(cin, mid, 1, act=nn.SiLU),
            _conv(mid, mid, 3, stride, groups=mid, act=nn.SiLU),
            SqueezeExcite(mid, max(1, cin // 4)),
            _conv(mid, cout, 1, act=None),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class InceptionBlock(nn.Module):
    """Parallel 1x1, 3x3 and factorised 5x5 (two 3x3) paths plus pooled projection."""

    def __init__(self, cin, b1, b3, b5, bp):
        super().__init__()
        self.b1 = _conv(cin, b1, 1, act=nn.ReLU)
        self.b3 = nn.Sequential(_conv(cin, b3, 1, act=nn.ReLU), _conv(b3, b3, 3, act=nn.ReLU))
        self.b5 = nn.Sequential(
            _conv(cin, b5, 1, act=nn.ReLU), _conv(b5, b5, 3, act=nn.ReLU), _conv(b5, b5, 3, act=nn.ReLU)
        )
        self.bp = nn.Sequential(nn.AvgPool2d(3, 1, 1), _conv(cin, bp, 1, act=nn.ReLU))
        self.out_channels = b1 + b3 + b5 + bp

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class ReductionBlock(nn.Module):
    def __init__(self, cin, cconv):
        super().__init__()
        self.conv = _conv(cin, cconv, 3, 2, act=nn.ReLU)
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.out_channels = cin + cconv

    def forward(self, x):
        return torch.cat([self.conv(x), self.pool(x)], dim=1)


class TinyViT(nn.Module):
    def __init__(self, input_size, dim=TINY_FEATURE_DIM, depth=2, heads=4, mlp=128):
        super().__init__()
        h, w = input_size
        self.num_patches = (h // VIT_PATCH) * (w // VIT_PATCH)
        self.patch_embed = nn.Conv2d(3, dim, VIT_PATCH, VIT_PATCH)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_patches + 1, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, mlp, dropout=0.0, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.ln = nn.LayerNorm(dim)

    def tokens(self, x):
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)
        return t + self.pos_embed

    def forward(self, x):
        t = self.encoder(self.tokens(x))
        return self.ln(t[:, 0])


def _tiny_body(spec: BackboneSpec) -> Tuple[nn.Module, List[str]]:
    d = spec.feature_dim
    pool = [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    if spec.family == "mobilenet_v2":
        body = nn.Sequential(
            _conv(3, 16, 3, 2),
            InvertedResidual(16, 24, 2),
            InvertedResidual(24, 24, 1),
            InvertedResidual(24, 32, 2),
            _conv(32, d, 1),
            *pool,
        )
        return body, ["0", "1", "2", "3", "4"]
    if spec.family == "efficientnet_v2":
        body = nn.Sequential(
            _conv(3, 16, 3, 2, act=nn.SiLU),
            FusedMBConv(16, 24, 2),
            MBConv(24, 32, 2),
            _conv(32, d, 1, act=nn.SiLU),
            *pool,
        )
        return body, ["0", "1", "2", "3"]
    if spec.family == "inception_v2":
        a = InceptionBlock(24, 16, 16, 12, 8)
        r = ReductionBlock(a.out_channels, 32)
        b = InceptionBlock(r.out_channels, 16, 24, 16, 8)
        body = nn.Sequential(
            nn.Sequential(_conv(3, 16, 3, 2, act=nn.ReLU), _conv(16, 24, 3, act=nn.ReLU), nn.MaxPool2d(3, 2, 1)),
            a, r, b,
            _conv(b.out_channels, d, 1, act=nn.ReLU),
            *pool,
        )
        return body, ["0", "1", "2", "3", "4"]
    body = TinyViT(spec.input_size, dim=d)
    return body, ["patch_embed", "encoder.layers.0", "encoder.layers.1", "ln"]


# --------------------------------------------------------------------------
# full_pretrained architectures (torchvision reference networks)
# --------------------------------------------------------------------------

class _Pooled(nn.Module):
    def __init__(self, features):
        super().__init__()
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def reference_network(spec: BackboneSpec) -> nn.Module:
    """The untrained torchvision network whose state dict the weight store holds."""
    from torchvision import models as tvm

    arch = spec.reference_arch
    if arch == "mobilenet_v2":
        return tvm.mobilenet_v2(weights=None)
    if arch == "efficientnet_v2_s":
        return tvm.efficientnet_v2_s(weights=None)
    if arch == "inception_v3":
        return tvm.inception_v3(weights=None, aux_logits=True, init_weights=False, transform_input=False)
    if arch == "vit_b_16":
        return tvm.vit_b_16(weights=None, image_size=spec.input_size[0])
    raise ConfigError(f"no reference architecture {arch!r} available for {spec.family}")


def _full_body(net: nn.Module, spec: BackboneSpec) -> Tuple[nn.Module, List[str]]:
    arch = spec.reference_arch
    if arch in ("mobilenet_v2", "efficientnet_v2_s"):
        body = _Pooled(net.features)
        n = len(net.features)
        return body, [f"features.{i}" for i in range(n)]
    if arch == "inception_v3":
        net.aux_logits = False
        net.AuxLogits = None
        net.fc = nn.Identity()
        net.dropout = nn.Identity()
        names = [n for n, _ in net.named_children() if n not in ("fc", "dropout", "AuxLogits")]
        return net, names
    if arch == "vit_b_16":
        if spec.input_size[0] != spec.input_size[1]:
            raise UnsupportedInputSize("torchvision ViT-B/16 requires a square input")
        net.heads = nn.Identity()
        names = ["conv_proj"] + [f"encoder.layers.{n}" for n, _ in net.encoder.layers.named_children()] + ["encoder.ln"]
        return net, names
    raise ConfigError(f"unsupported reference architecture {arch!r}")


def default_weights_dir() -> Path:
    return Path(os.environ.get("CTKIDNEY_WEIGHTS", "weights"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def weight_file(weights_dir, family: str, variant: str = "full_pretrained") -> Path:
    return Path(weights_dir) / family / f"{variant}.pt"


def register_weights(weights_dir, family: str, state_dict: dict, variant: str = "full_pretrained") -> Path:
    """Store a reference-network state dict and record its hash in MANIFEST.json."""
    weights_dir = Path(weights_dir)
    path = weight_file(weights_dir, family, variant)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state_dict, path)
    man_path = weights_dir / "MANIFEST.json"
    manifest = json.loads(man_path.read_text()) if man_path.exists() else {}
    manifest[f"{family}/{variant}.pt"] = sha256_file(path)
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_store_weights(weights_dir, family: str, variant: str = "full_pretrained") -> dict:
    weights_dir = Path(weights_dir)
    path = weight_file(weights_dir, family, variant)
    man_path = weights_dir / "MANIFEST.json"
    if not path.exists() or not man_path.exists():
        raise WeightsUnavailable(
            f"no {variant} weights for {family} at {path}; populate the store with scripts/fetch_weights.py"
        )
    expected = json.loads(man_path.read_text()).get(f"{family}/{variant}.pt")
    actual = sha256_file(path)
    if expected != actual:
        raise WeightsUnavailable(f"hash mismatch for {path}: manifest {expected}, file {actual}")
    return torch.load(path, map_location="cpu", weights_only=True)


def _resize_vit_positions(state: dict, net: nn.Module) -> dict:
    key = "encoder.pos_embedding"
    want = net.state_dict()[key].shape
    if key in state and state[key].shape != want:
        from torchvision.models.vision_transformer import interpolate_embeddings

        state = interpolate_embeddings(int(net.image_size), 16, state)
    return state


# --------------------------------------------------------------------------
# public model classes
# --------------------------------------------------------------------------

class FeatureExtractor(nn.Module):
    """Maps raw ``(batch, H, W, 3)`` images in [0, 1] to ``(batch, feature_dim)``."""

    def __init__(self, spec: BackboneSpec, body: nn.Module, stages: Sequence[str]):
        super().__init__()
        self.spec = spec
        self.body = body
        # parameterless children (pools, flatten) are not freezable stages
        self.stages = [s for s in stages if any(True for _ in body.get_submodule(s).parameters())]
        self.register_buffer("mean", torch.tensor(spec.norm_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(spec.norm_std, dtype=torch.float32).view(1, 3, 1, 1))

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def stage_module(self, name: str) -> nn.Module:
        return self.body.get_submodule(name)

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != 3 or tuple(x.shape[1:3]) != self.spec.input_size:
            raise ShapeMismatch(
                f"expected (batch, {self.spec.input_size[0]}, {self.spec.input_size[1]}, 3), got {tuple(x.shape)}"
            )
        x = x.permute(0, 3, 1, 2)
        x = (x - self.mean) / self.std
        return self.body(x)


def build_backbone(spec: BackboneSpec, weights_dir=None, load_weights: bool = True) -> FeatureExtractor:
    """Construct a family's feature extractor.

    ``load_weights=False`` on a full variant builds the bare architecture, as
    needed when a checkpoint will supply the parameters.
    """
    if spec.family == "vit_b16":
        assert spec.num_patches == (spec.input_size[0] // 16) * (spec.input_size[1] // 16)
    if spec.variant == "tiny_random":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            body, stages = _tiny_body(spec)
    else:
        state = None
        if load_weights:
            state = load_store_weights(weights_dir or default_weights_dir(), spec.family)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            net = reference_network(spec)
        if state is not None:
            if spec.reference_arch == "vit_b_16":
                state = _resize_vit_positions(state, net)
            net.load_state_dict(state)
        body, stages = _full_body(net, spec)
    extractor = FeatureExtractor(spec, body, stages)
    probe = probe_feature_dim(extractor)
    if probe != spec.feature_dim:
        raise ShapeMismatch(f"{spec.family}/{spec.variant}: extractor emits {probe} features, spec says {spec.feature_dim}")
    return extractor


def probe_feature_dim(extractor: FeatureExtractor) -> int:
    h, w = extractor.spec.input_size
    was_training = extractor.training
    extractor.eval()
    with torch.no_grad():
        out = extractor(torch.zeros(1, h, w, 3))
    extractor.train(was_training)
    return int(out.shape[1])


class ClassifierModel(nn.Module):
    """Feature extractor plus a dense softmax head."""

    def __init__(self, extractor: FeatureExtractor, num_classes: int, freeze: str = "head_and_last_stage",
                 head_seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.extractor = extractor
        self.num_classes = num_classes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            self.head = nn.Linear(extractor.feature_dim, num_classes)
        self.freeze = freeze
        self.trainable_mask: Dict[str, bool] = {}
        set_freeze_policy(self, freeze)

    @property
    def spec(self) -> BackboneSpec:
        return self.extractor.spec

    def features(self, x):
        return self.extractor(x)

    def logits(self, x):
        return self.head(self.extractor(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=-1)

    def frozen_modules(self) -> List[nn.Module]:
        return [self.extractor.stage_module(s) for s in self.extractor.stages if not self.trainable_mask[s]]


def set_freeze_policy(model: ClassifierModel, policy: str) -> None:
    if policy not in FREEZE_POLICIES:
        raise ConfigError(f"freeze policy must be one of {FREEZE_POLICIES}, got {policy!r}")
    stages = model.extractor.stages
    mask = {s: policy == "full" for s in stages}
    if policy == "head_and_last_stage":
        mask[stages[-1]] = True
    mask["head"] = True
    for p in model.extractor.parameters():
        p.requires_grad_(False)
    for s in stages:
        for p in model.extractor.stage_module(s).parameters():
            p.requires_grad_(mask[s])
    if policy == "full":
        for p in model.extractor.parameters():
            p.requires_grad_(True)
    for p in model.head.parameters():
        p.requires_grad_(True)
    model.freeze = policy
    model.trainable_mask = mask


def attach_head(extractor: FeatureExtractor, num_classes: int, freeze: str = "head_and_last_stage",
                seed: int = 0) -> ClassifierModel:
    return ClassifierModel(extractor, num_classes, freeze=freeze, head_seed=seed)


def as_tensor_batch(batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch.float()
    return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))


def predict_proba(model: nn.Module, batch, chunk_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities for a ``(batch, H, W, 3)`` array."""
    x = as_tensor_batch(batch)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected a 4-D image batch, got shape {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outs = [model(x[i : i + chunk_size]) for i in range(0, len(x), chunk_size)]
    finally:
        model.train(was_training)
    return torch.cat(outs).numpy()


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: ClassifierModel, classes: Sequence[str], extra: Optional[dict] = None) -> Path:
    """Self-describing checkpoint: parameters, backbone spec and class names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "classifier",
            "spec": model.spec.to_dict(),
            "classes": list(classes),
            "freeze": model.freeze,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path) -> Tuple[ClassifierModel, Tuple[str, ...]]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "classifier":
        raise ConfigError(f"{path} is not a classifier checkpoint")
    spec = BackboneSpec.from_dict(blob["spec"])
    model = attach_head(build_backbone(spec, load_weights=False), len(blob["classes"]), freeze=blob["freeze"])
    model.load_state_dict(blob["state_dict"])
    return model, tuple(blob["classes"])
