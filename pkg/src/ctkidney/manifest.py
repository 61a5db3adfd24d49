"""Dataset catalog: directory scanning, label encoding and the 80/20 split.

A corpus is a class-per-directory tree (``Cyst/``, ``Normal/``, ``Stone/``,
``Tumor/`` for the public CT kidney release).  Records are always ordered by
their root-relative POSIX path so two scans of one tree serialize identically.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    DegenerateClass,
    EmptyClass,
    IndexOutOfRange,
    MissingRoot,
    UnreadableImage,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "test", "unassigned")
CSV_HEADER = ("path", "class_name", "class_index", "split")


@dataclass(frozen=True)
class LabelCodec:
    """Bidirectional class-name / index / one-hot mapping (lexicographic order)."""

    classes: Tuple[str, ...]

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(set(classes)) != len(classes):
            raise ValueError(f"duplicate class names in {classes}")
        object.__setattr__(self, "classes", tuple(sorted(classes)))

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelCodec":
        return cls(tuple(sorted(set(names))))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; known: {list(self.classes)}") from None

    encode = index_of

    def decode(self, index: int) -> str:
        if not 0 <= int(index) < self.num_classes:
            raise IndexOutOfRange(f"class index {index} not in [0, {self.num_classes})")
        return self.classes[int(index)]

    def one_hot(self, index: int) -> np.ndarray:
        return one_hot(index, self.num_classes)


@dataclass(frozen=True)
class SampleRecord:
    path: str  # POSIX path relative to the manifest root
    class_name: str
    class_index: int
    split: str = "unassigned"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class Manifest:
    records: List[SampleRecord]
    codec: LabelCodec
    root: Optional[Path] = None
    seed: Optional[int] = None
    metadata: Dict[str, object] = field(default_factory=dict)
    scan_errors: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def class_counts(self) -> Dict[str, int]:
        counts = Counter(r.class_name for r in self.records)
        return {name: counts.get(name, 0) for name in self.codec.classes}

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def paths(self) -> List[str]:
        return [r.path for r in self.records]

    def labels(self) -> np.ndarray:
        return np.array([r.class_index for r in self.records], dtype=np.int64)

    def subset(self, split: str) -> "Manifest":
        return replace(self, records=[r for r in self.records if r.split == split])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow((r.path, r.class_name, r.class_index, r.split))
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def write_errors(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{p}\t{why}\n" for p, why in self.scan_errors), encoding="utf-8")
        return path


def read_manifest(csv_path, root=None) -> Manifest:
    """Load a manifest written by :meth:`Manifest.write_csv`."""
    csv_path = Path(csv_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{csv_path}: bad header {header}")
        rows = [row for row in reader if row]
    codec = LabelCodec.from_names(row[1] for row in rows)
    records = []
    for path, name, index, split in rows:
        if codec.index_of(name) != int(index):
            raise ValueError(f"{csv_path}: {path} has index {index} but {name} encodes to {codec.index_of(name)}")
        records.append(SampleRecord(path, name, int(index), split))
    return Manifest(records=records, codec=codec, root=Path(root) if root is not None else None)


def _probe(path: Path) -> Optional[str]:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of types here
        return f"{type(exc).__name__}: {exc}"
    return None


def scan_dataset(root_dir, strict: bool = False) -> Manifest:
    """Catalog a class-per-subdirectory image tree.

    Files that fail a header probe are excluded and listed in
    ``manifest.scan_errors``; with ``strict=True`` the first one raises
    :class:`UnreadableImage` instead.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise MissingRoot(f"dataset root does not exist: {root}")

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise EmptyClass(f"no class subdirectories under {root}")

    records: List[Tuple[str, str]] = []
    errors: List[Tuple[str, str]] = []
    for cdir in class_dirs:
        files = sorted(
            p for p in cdir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        kept = 0
        for f in files:
            rel = f.relative_to(root).as_posix()
            why = _probe(f)
            if why is not None:
                if strict:
                    raise UnreadableImage(f"{rel}: {why}")
                log.warning("excluding unreadable image %s (%s)", rel, why)
                errors.append((rel, why))
                continue
            records.append((rel, cdir.name))
            kept += 1
        if kept == 0:
            raise EmptyClass(f"class directory {cdir} holds no readable images")

    codec = LabelCodec.from_names(d.name for d in class_dirs)
    records.sort()
    out = [SampleRecord(p, name, codec.index_of(name)) for p, name in records]
    return Manifest(records=out, codec=codec, root=root, scan_errors=sorted(errors))


def one_hot(class_index: int, num_classes: int) -> np.ndarray:
    if not 0 <= class_index < num_classes:
        raise IndexOutOfRange(f"class index {class_index} not in [0, {num_classes})")
    v = np.zeros(num_classes, dtype=np.float32)
    v[class_index] = 1.0
    return v


def one_hot_matrix(indices: Sequence[int], num_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_classes):
        raise IndexOutOfRange(f"class indices outside [0, {num_classes})")
    return np.eye(num_classes, dtype=np.float32)[indices]


def train_count(count: int, train_fraction: float) -> int:
    # Python's round() is ties-to-even.
    return int(round(count * train_fraction))


def assign_splits(manifest: Manifest, train_fraction: float = 0.8, seed: int = 0) -> Manifest:
    """Return a copy of ``manifest`` with every record labelled train or test.

    Per class, ``round(count * train_fraction)`` records (ties to even) go to
    train, chosen by a seeded permutation; record order is preserved.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    split = ["test"] * len(manifest.records)
    for ci in range(manifest.codec.num_classes):
        members = [i for i, r in enumerate(manifest.records) if r.class_index == ci]
        n = len(members)
        if n == 0:
            continue
        if n < 2:
            raise DegenerateClass(f"class {manifest.codec.decode(ci)!r} has {n} sample; need >= 2")
        n_train = train_count(n, train_fraction)
        if n_train >= n or n_train == 0:
            raise DegenerateClass(
                f"class {manifest.codec.decode(ci)!r}: {n} samples at fraction {train_fraction} "
                f"leaves {n - n_train} test / {n_train} train"
            )
        for j in rng.permutation(n)[:n_train]:
            split[members[j]] = "train"
    records = [replace(r, split=s) for r, s in zip(manifest.records, split)]
    meta = dict(manifest.metadata, split_mode="stratified", train_fraction=train_fraction, split_seed=seed)
    return replace(manifest, records=records, seed=seed, metadata=meta)


def stratified_split(manifest: Manifest, train_fraction: float = 0.8, seed: int = 0) -> Tuple[Manifest, Manifest]:
    assigned = assign_splits(manifest, train_fraction, seed)
    return assigned.subset("train"), assigned.subset("test")
