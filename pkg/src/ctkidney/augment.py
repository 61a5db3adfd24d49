"""Image loading, seeded geometric augmentation and batch streams.

Images travel through the pipeline as float32 ``(H, W, 3)`` arrays with
intensities in ``[0, 1]``.  Every random draw is derived from an explicit
seed, so a stream replays bit-identically no matter how it is consumed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DecodeError, ShapeMismatch
from .manifest import Manifest, one_hot_matrix

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class AugmentationConfig:
    """Transform magnitudes for training-time augmentation.

    ``zoom_range`` z draws an isotropic magnification from ``[1 - z, 1 + z]``
    (values above 1 enlarge the content); shifts are fractions of the image
    side; ``rotation_range_deg`` r draws an angle from ``[-r, r]``, positive
    meaning counter-clockwise on screen.
    """

    target_size: Tuple[int, int] = (224, 224)
    rotation_range_deg: float = 20.0
    zoom_range: float = 0.15
    width_shift: float = 0.1
    height_shift: float = 0.1
    horizontal_flip: bool = True
    vertical_flip: bool = True
    rescale: float = 1.0 / 255.0

    def __post_init__(self):
        size = tuple(int(s) for s in self.target_size)
        object.__setattr__(self, "target_size", size)
        if len(size) != 2 or min(size) < 32:
            raise ConfigError(f"target_size components must be >= 32, got {self.target_size}")
        if not 0 <= self.rotation_range_deg <= 180:
            raise ConfigError(f"rotation_range_deg must be in [0, 180], got {self.rotation_range_deg}")
        for name in ("zoom_range", "width_shift", "height_shift"):
            v = getattr(self, name)
            if not 0 <= v <= 0.5:
                raise ConfigError(f"{name} must be in [0, 0.5], got {v}")
        if self.rescale <= 0:
            raise ConfigError(f"rescale must be positive, got {self.rescale}")

    @classmethod
    def preset(cls, name: str) -> "AugmentationConfig":
        sizes = {"224": (224, 224), "128": (128, 128)}
        if name not in sizes:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(sizes)}")
        return cls(target_size=sizes[name])

    @classmethod
    def identity(cls, target_size=(224, 224), rescale=1.0 / 255.0) -> "AugmentationConfig":
        return cls(target_size, 0.0, 0.0, 0.0, 0.0, False, False, rescale)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = list(self.target_size)
        return d


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    shift_rows: float = 0.0  # pixels
    shift_cols: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_geometric_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.scale == 1.0 and self.shift_rows == 0.0 and self.shift_cols == 0.0


def _to_rgb_array(im: Image.Image) -> np.ndarray:
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        if im.mode != "I":
            arr = arr * (255.0 / 65535.0)
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif im.mode == "F":
        arr = np.repeat(np.asarray(im, dtype=np.float64)[..., None], 3, axis=2)
    elif im.mode in ("L", "1"):
        arr = np.repeat(np.asarray(im.convert("L"), dtype=np.float64)[..., None], 3, axis=2)
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr


def resize_bilinear(arr: np.ndarray, target_size: Tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an ``(H, W, C)`` array."""
    h, w = arr.shape[:2]
    th, tw = target_size
    if (h, w) == (th, tw):
        return arr.copy()
    out = ndimage.zoom(arr, (th / h, tw / w, 1), order=1, grid_mode=True, mode="nearest")
    if out.shape[:2] != (th, tw):  # pragma: no cover - float rounding guard
        raise ShapeMismatch(f"resize produced {out.shape[:2]}, wanted {(th, tw)}")
    return out


def load_and_resize(path, target_size=(224, 224), rescale: float = 1.0 / 255.0) -> np.ndarray:
    """Decode an image file into a float32 ``(H, W, 3)`` array in ``[0, 1]``.

    Grayscale sources are replicated across three channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = _to_rgb_array(im)
    except (OSError, ValueError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc
    arr = resize_bilinear(arr, tuple(target_size)) * rescale
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def sample_params(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    # Always draw all six values, in a fixed order, so toggling one transform
    # leaves the others' draws unchanged.
    h, w = cfg.target_size
    u = rng.uniform(-1.0, 1.0, size=4)
    flips = rng.random(2) < 0.5
    return AugmentParams(
        angle_deg=float(u[0] * cfg.rotation_range_deg),
        scale=float(1.0 + u[1] * cfg.zoom_range),
        shift_rows=float(u[2] * cfg.height_shift * h),
        shift_cols=float(u[3] * cfg.width_shift * w),
        flip_h=bool(flips[0] and cfg.horizontal_flip),
        flip_v=bool(flips[1] and cfg.vertical_flip),
    )


def apply_transform(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Apply rotation/zoom/shift about the image centre, then flips.

    A source pixel at ``(r, c)`` lands at ``centre + s*R(angle)(r - centre) + shift``
    with ``R = [[cos, -sin], [sin, cos]]`` in (row, col) coordinates.
    Uncovered output pixels are filled with 0.
    """
    out = img
    if not p.is_geometric_identity:
        h, w = img.shape[:2]
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        th = math.radians(p.angle_deg)
        fwd = p.scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        inv = np.linalg.inv(fwd)
        offset2 = centre - inv @ (centre + np.array([p.shift_rows, p.shift_cols]))
        matrix = np.eye(3)
        matrix[:2, :2] = inv
        offset = np.array([offset2[0], offset2[1], 0.0])
        out = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    if p.flip_h:
        out = out[:, ::-1]
    if p.flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(img: np.ndarray, cfg: AugmentationConfig, rng_seed) -> np.ndarray:
    if tuple(img.shape[:2]) != cfg.target_size:
        raise ShapeMismatch(f"image {img.shape[:2]} does not match target_size {cfg.target_size}")
    params = sample_params(cfg, np.random.default_rng(rng_seed))
    return np.clip(apply_transform(img, params), 0.0, 1.0)


def sample_seed(stream_seed: int, epoch: int, ordinal: int) -> int:
    return int(np.random.SeedSequence([stream_seed, epoch, ordinal]).generate_state(1)[0])


class BatchStream:
    """Epoch-indexed stream of ``(images, one_hot_labels)`` batches.

    ``augment=True`` marks a training stream.  Evaluation streams only
    load, resize and rescale, so every pass yields identical tensors.
    """

    def __init__(
        self,
        manifest: Manifest,
        cfg: AugmentationConfig,
        batch_size: int = 32,
        shuffle: bool = False,
        seed: int = 0,
        augment: bool = False,
        cache: bool = True,
        workers: int = 0,
    ):
        if len(manifest) == 0:
            raise ValueError("cannot stream an empty manifest")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.manifest = manifest
        self.cfg = cfg
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.augment = augment
        self.workers = workers
        self._cache: Optional[dict] = {} if cache else None
        self._labels = one_hot_matrix(manifest.labels(), manifest.codec.num_classes)

    def __len__(self) -> int:
        return math.ceil(len(self.manifest) / self.batch_size)

    @property
    def num_classes(self) -> int:
        return self._labels.shape[1]

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.manifest)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng(np.random.SeedSequence([self.seed, epoch])).permutation(n)

    def _base(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        rec = self.manifest.records[i]
        img = load_and_resize(self.manifest.resolve(rec), self.cfg.target_size, self.cfg.rescale)
        if self._cache is not None:
            self._cache[i] = img
        return img

    def _sample(self, i: int, epoch: int) -> np.ndarray:
        img = self._base(i)
        if self.augment:
            img = augment(img, self.cfg, sample_seed(self.seed, epoch, i))
        return img

    def iter_epoch(self, epoch: int = 0) -> Iterator[Batch]:
        idx = self.order(epoch)
        pool = ThreadPoolExecutor(self.workers) if self.workers > 0 else None
        try:
            for start in range(0, len(idx), self.batch_size):
                chunk = idx[start : start + self.batch_size]
                if pool is not None:
                    imgs = list(pool.map(lambda i: self._sample(int(i), epoch), chunk))
                else:
                    imgs = [self._sample(int(i), epoch) for i in chunk]
                yield np.stack(imgs), self._labels[chunk]
        finally:
            if pool is not None:
                pool.shutdown()

    def __iter__(self) -> Iterator[Batch]:
        return self.iter_epoch(0)


class ArrayStream:
    """In-memory counterpart of :class:`BatchStream` for preloaded arrays."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 32,
                 shuffle: bool = False, seed: int = 0,
                 augment_cfg: Optional[AugmentationConfig] = None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.float32)
        if labels.ndim == 1:
            labels = one_hot_matrix(labels.astype(np.int64), int(labels.max()) + 1)
        if len(images) != len(labels) or len(images) == 0:
            raise ValueError("images and labels must be nonempty and of equal length")
        self.images, self.labels = images, labels
        self.batch_size, self.shuffle, self.seed = batch_size, shuffle, seed
        self.augment_cfg = augment_cfg

    def __len__(self) -> int:
        return math.ceil(len(self.images) / self.batch_size)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def iter_epoch(self, epoch: int = 0) -> Iterator[Batch]:
        n = len(self.images)
        idx = np.arange(n)
        if self.shuffle:
            idx = np.random.default_rng(np.random.SeedSequence([self.seed, epoch])).permutation(n)
        for start in range(0, n, self.batch_size):
            chunk = idx[start : start + self.batch_size]
            x = self.images[chunk]
            if self.augment_cfg is not None:
                x = np.stack([augment(x[j], self.augment_cfg, sample_seed(self.seed, epoch, int(i)))
                              for j, i in enumerate(chunk)])
            yield x, self.labels[chunk]

    def __iter__(self) -> Iterator[Batch]:
        return self.iter_epoch(0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def dump_augmented(manifest: Manifest, cfg: AugmentationConfig, n: int, out_dir, seed: int = 0):
    """Write ``n`` augmented training samples as PNG for visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = BatchStream(manifest, cfg, batch_size=1, shuffle=True, seed=seed, augment=True, cache=False)
    written = []
    for k, (x, y) in enumerate(stream.iter_epoch(0)):
        if k >= n:
            break
        name = manifest.codec.decode(int(np.argmax(y[0])))
        path = out_dir / f"aug_{k:04d}_{name}.png"
        Image.fromarray(to_uint8(x[0])).save(path)
        written.append(path)
    return written
