"""LIME explanations for image classifiers.

An image is cut into superpixels; random on/off masks over those segments
produce perturbed copies; the black-box model scores each copy; and a
kernel-weighted ridge regression on the binary masks yields one weight
per segment.  Segments with the largest positive weights are the regions
that pushed the model towards the target class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.measure import label as connected_components
from skimage.segmentation import find_boundaries, slic

from .errors import ConfigError, SingularSystem

log = logging.getLogger(__name__)

YELLOW = (1.0, 1.0, 0.0)


@dataclass(frozen=True)
class LimeConfig:
    n_segments: int = 50
    n_samples: int = 1000
    kernel_width: float = 0.25
    top_k: int = 5
    seed: int = 0
    ridge: float = 1e-3
    segmenter: str = "grid"  # or "slic"
    fill: Union[str, float] = "mean"
    batch_size: int = 100
    min_r2: float = 0.5

    def __post_init__(self):
        if self.n_segments < 2:
            raise ConfigError("n_segments must be >= 2")
        if self.kernel_width <= 0:
            raise ConfigError("kernel_width must be positive")
        if self.segmenter not in ("grid", "slic"):
            raise ConfigError("segmenter must be 'grid' or 'slic'")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LimeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown lime keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int, ids 0..n_segments-1

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


def grid_segment(shape: Tuple[int, int], n_segments_target: int) -> SuperpixelMap:
    """Row-major grid of near-equal rectangles (band widths differ by <= 1 px)."""
    h, w = shape
    rows = int(min(h, max(1, round(np.sqrt(n_segments_target * h / w)))))
    cols = int(min(w, max(1, round(n_segments_target / rows))))
    r_edges = np.linspace(0, h, rows + 1).astype(int)
    c_edges = np.linspace(0, w, cols + 1).astype(int)
    r_idx = np.searchsorted(r_edges, np.arange(h), side="right") - 1
    c_idx = np.searchsorted(c_edges, np.arange(w), side="right") - 1
    return SuperpixelMap((r_idx[:, None] * cols + c_idx[None, :]).astype(np.int64))


def _relabel_4connected(labels: np.ndarray) -> np.ndarray:
    return connected_components(labels + 1, background=0, connectivity=1).astype(np.int64) - 1


def segment(img: np.ndarray, n_segments_target: int, seed: int = 0, method: str = "grid") -> SuperpixelMap:
    """Superpixels with contiguous ids and 4-connected segments.

    ``method="slic"`` clusters by colour and position; when its segment
    count falls outside ``[0.5, 2] x n_segments_target`` the grid is used.
    Both methods are deterministic (``seed`` is accepted for interface
    symmetry with randomised segmenters).
    """
    if n_segments_target < 2:
        raise ConfigError("n_segments_target must be >= 2")
    shape = img.shape[:2]
    if method == "grid":
        return grid_segment(shape, n_segments_target)
    raw = slic(np.asarray(img, dtype=np.float64), n_segments=n_segments_target, compactness=10.0,
               start_label=0, enforce_connectivity=True, channel_axis=-1)
    spmap = SuperpixelMap(_relabel_4connected(raw))
    if not 0.5 * n_segments_target <= spmap.n_segments <= 2 * n_segments_target:
        log.warning("slic produced %d segments for target %d; using grid", spmap.n_segments, n_segments_target)
        return grid_segment(shape, n_segments_target)
    return spmap


def fill_value(img: np.ndarray, fill: Union[str, float]) -> np.ndarray:
    if fill == "mean":
        return np.asarray(img, dtype=np.float32).mean(axis=(0, 1))
    return np.full(img.shape[-1], float(fill), dtype=np.float32)


def apply_masks(img: np.ndarray, spmap: SuperpixelMap, masks: np.ndarray, fill) -> np.ndarray:
    """Replace every switched-off segment with ``fill``; returns ``(n, H, W, C)``."""
    keep = np.asarray(masks, dtype=bool)[:, spmap.labels]
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float32), img.shape[-1:])
    return np.where(keep[..., None], img[None].astype(np.float32), fill).astype(np.float32)


def sample_masks(n_samples: int, n_segments: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    masks = rng.integers(0, 2, size=(n_samples, n_segments), dtype=np.uint8)
    masks[0] = 1
    return masks


def perturb(img: np.ndarray, spmap: SuperpixelMap, n_samples: int, seed: int = 0,
            fill: Union[str, float] = "mean") -> Tuple[np.ndarray, np.ndarray]:
    """Random segment masks (row 0 all ones) and the matching perturbed images."""
    if n_samples < spmap.n_segments + 2:
        raise ValueError(f"n_samples must be >= n_segments + 2 = {spmap.n_segments + 2}")
    masks = sample_masks(n_samples, spmap.n_segments, seed)
    return masks, apply_masks(img, spmap, masks, fill_value(img, fill))


def kernel_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """``exp(-d^2 / width^2)`` with d the cosine distance to the all-ones mask."""
    if kernel_width <= 0:
        raise ValueError("kernel_width must be positive")
    m = np.asarray(masks, dtype=np.float64)
    # cos(m, 1) = sum(m) / (|m| * sqrt(S)) = sqrt(sum(m) / S) for binary m
    similarity = np.sqrt(m.sum(axis=1) / m.shape[1])
    d = 1.0 - similarity
    return np.exp(-(d ** 2) / kernel_width ** 2)


def fit_surrogate(masks, targets, weights, ridge: float = 1e-3) -> Tuple[np.ndarray, float, float]:
    """Weighted ridge regression of ``targets`` on binary mask features.

    Minimises ``sum_i w_i (y_i - b.m_i - b0)^2 / sum_i w_i + ridge * |b|^2``,
    so rescaling all weights leaves the solution unchanged.  The intercept
    is not penalised.  Returns ``(coefficients, intercept, weighted r2)``.
    """
    X = np.asarray(masks, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if not (len(X) == len(y) == len(w)):
        raise ValueError("masks, targets and weights must have equal length")
    wn = w / w.sum()
    x_bar = wn @ X
    y_bar = float(wn @ y)
    Xc, yc = X - x_bar, y - y_bar
    gram = Xc.T @ (wn[:, None] * Xc)
    rhs = Xc.T @ (wn * yc)
    S = X.shape[1]
    if ridge == 0.0 and np.linalg.matrix_rank(gram) < S:
        raise SingularSystem("design matrix is rank-deficient and ridge is 0")
    coef = np.linalg.solve(gram + ridge * np.eye(S), rhs)
    intercept = y_bar - float(x_bar @ coef)
    resid = y - (X @ coef + intercept)
    ss_res = float(wn @ resid ** 2)
    ss_tot = float(wn @ yc ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return coef, intercept, r2


@dataclass
class ExplanationResult:
    target_class: int
    segment_weights: np.ndarray
    intercept: float
    top_k: List[Tuple[int, float]]
    local_fidelity_r2: float
    low_fidelity: bool
    superpixels: Optional[SuperpixelMap] = field(default=None, repr=False)
    config: Optional[LimeConfig] = None

    def to_dict(self) -> dict:
        return {
            "target_class": int(self.target_class),
            "n_segments": int(len(self.segment_weights)),
            "segment_weights": [float(v) for v in self.segment_weights],
            "intercept": float(self.intercept),
            "top_k": [[int(s), float(v)] for s, v in self.top_k],
            "local_fidelity_r2": float(self.local_fidelity_r2),
            "low_fidelity": bool(self.low_fidelity),
            "config": asdict(self.config) if self.config is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def rank_segments(weights: np.ndarray, k: int) -> List[Tuple[int, float]]:
    order = np.lexsort((np.arange(len(weights)), -np.asarray(weights)))
    return [(int(i), float(weights[i])) for i in order[: min(k, len(weights))]]


PredictFn = Callable[[np.ndarray], np.ndarray]


def _as_predict_fn(model) -> PredictFn:
    if hasattr(model, "parameters"):
        from .models import predict_proba

        return lambda x: predict_proba(model, x)
    return model


def explain(model, img: np.ndarray, target_class: int, cfg: LimeConfig = LimeConfig()) -> ExplanationResult:
    """Segment, perturb, score, weight and fit; deterministic given ``cfg.seed``."""
    predict = _as_predict_fn(model)
    img = np.asarray(img, dtype=np.float32)
    spmap = segment(img, cfg.n_segments, cfg.seed, cfg.segmenter)
    n_samples = max(cfg.n_samples, spmap.n_segments + 2)
    masks = sample_masks(n_samples, spmap.n_segments, cfg.seed)
    fill = fill_value(img, cfg.fill)
    scores = []
    for start in range(0, n_samples, cfg.batch_size):
        batch = apply_masks(img, spmap, masks[start : start + cfg.batch_size], fill)
        scores.append(np.asarray(predict(batch), dtype=np.float64)[:, target_class])
    targets = np.concatenate(scores)
    weights = kernel_weights(masks, cfg.kernel_width)
    coef, intercept, r2 = fit_surrogate(masks, targets, weights, cfg.ridge)
    return ExplanationResult(
        target_class=int(target_class),
        segment_weights=coef,
        intercept=intercept,
        top_k=rank_segments(coef, cfg.top_k),
        local_fidelity_r2=r2,
        low_fidelity=r2 < cfg.min_r2,
        superpixels=spmap,
        config=cfg,
    )


def render_overlay(img: np.ndarray, spmap: SuperpixelMap, explanation: ExplanationResult,
                   top_k: Optional[int] = None, color=YELLOW, alpha: float = 0.4,
                   boundary_color=YELLOW) -> np.ndarray:
    """Tint the strongest positive segments and outline them.

    Pixels outside the highlighted segments are returned untouched.
    """
    if len(explanation.segment_weights) != spmap.n_segments:
        raise ValueError("explanation does not match the superpixel map")
    k = len(explanation.top_k) if top_k is None else top_k
    chosen = [s for s, wgt in rank_segments(explanation.segment_weights, k) if wgt > 0]
    out = np.array(img, dtype=np.float32, copy=True)
    if not chosen:
        return out
    mask = np.isin(spmap.labels, chosen)
    tint = np.asarray(color, dtype=np.float32)
    out[mask] = (1.0 - alpha) * out[mask] + alpha * tint
    edge = find_boundaries(mask.astype(np.int8), mode="inner") & mask
    out[edge] = np.asarray(boundary_color, dtype=np.float32)
    return out


def write_explanation(out_dir, result: ExplanationResult, overlay: np.ndarray) -> Tuple[Path, Path]:
    from PIL import Image

    from .augment import to_uint8

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "explanation.json"
    js.write_text(result.to_json())
    png = out_dir / "overlay.png"
    Image.fromarray(to_uint8(overlay)).save(png)
    return js, png
