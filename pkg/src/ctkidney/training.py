"""Seeded training loop with early stopping and best-weight restoration."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NonFiniteLoss, ShapeMismatch, StreamExhausted

log = logging.getLogger(__name__)

EPS = 1e-12
MONITORS = {"val_loss": "min", "val_acc": "max"}


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    monitor: str = "val_loss"
    patience: int = 5
    restore_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {sorted(MONITORS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    monitor: str = "val_loss"
    stopped_early: bool = False

    @property
    def best_epoch(self) -> int:
        return best_epoch(self.records, self.monitor)

    def to_dict(self) -> dict:
        return {
            "monitor": self.monitor,
            "best_epoch": self.best_epoch if self.records else None,
            "stopped_early": self.stopped_early,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        return cls([EpochRecord(**r) for r in d["records"]], d.get("monitor", "val_loss"), d["stopped_early"])


def cross_entropy(probs, onehot) -> float:
    """Mean over rows of ``-sum_c y_c * log(max(p_c, 1e-12))``."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {onehot.shape}")
    return float(np.mean(-np.sum(onehot * np.log(np.maximum(probs, EPS)), axis=1)))


def cross_entropy_from_logits(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    # log(max(p, eps)) == max(log p, log eps); log_softmax avoids underflow.
    logp = torch.clamp(torch.log_softmax(logits, dim=-1), min=math.log(EPS))
    return -(onehot * logp).sum(dim=-1).mean()


def best_epoch(records, monitor: str = "val_loss") -> int:
    if not records:
        raise ValueError("empty history")
    values = [getattr(r, monitor) for r in records]
    i = int(np.argmin(values)) if MONITORS[monitor] == "min" else int(np.argmax(values))
    return records[i].epoch


def early_stopping_step(history: TrainingHistory, patience: int) -> str:
    """``"stop"`` once the newest epoch trails the best one by ``patience`` epochs.

    Only a strictly better monitored value counts as improvement, so ties keep
    the earliest epoch as best.  The newest epoch never triggers a stop if it
    is itself the best.
    """
    if not history.records:
        raise ValueError("early_stopping_step needs a nonempty history")
    current = history.records[-1].epoch
    best = history.best_epoch
    return "stop" if current != best and current - best >= patience else "continue"


def _to_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.float()
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _iter_epoch(stream, epoch: int):
    if hasattr(stream, "iter_epoch"):
        return stream.iter_epoch(epoch)
    return iter(stream)


def _freeze_inactive_norms(model: nn.Module) -> None:
    # A frozen BatchNorm must not keep updating its running statistics.
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm) and not any(p.requires_grad for p in m.parameters()):
            m.eval()


def evaluate_loss(model: nn.Module, stream, epoch: int = 0) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` over one pass of ``stream``."""
    model.eval()
    total, loss_sum, correct = 0, 0.0, 0
    with torch.no_grad():
        for x, y in _iter_epoch(stream, epoch):
            x, y = _to_tensor(x), _to_tensor(y)
            logits = model.logits(x)
            loss_sum += float(cross_entropy_from_logits(logits, y)) * len(x)
            correct += int((logits.argmax(-1) == y.argmax(-1)).sum())
            total += len(x)
    if total == 0:
        raise StreamExhausted("validation stream yielded no batches")
    return loss_sum / total, correct / total


CheckpointFn = Callable[[Path, nn.Module], None]


def _default_checkpoint(path: Path, model: nn.Module) -> None:
    torch.save(model.state_dict(), path)


def train(
    model: nn.Module,
    train_stream,
    val_stream,
    cfg: TrainingConfig,
    checkpoint_dir=None,
    checkpoint_fn: Optional[CheckpointFn] = None,
) -> Tuple[nn.Module, TrainingHistory]:
    """Fit ``model`` (anything exposing ``logits(x)``) with Adam and early stopping.

    Returns the model, restored to its best-epoch parameters when
    ``cfg.restore_best`` is set, and the per-epoch history.  Only
    parameters with ``requires_grad`` are optimised.
    """
    checkpoint_fn = checkpoint_fn or _default_checkpoint
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = TrainingHistory(monitor=cfg.monitor)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.epsilon) if params else None
    best_state = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            _freeze_inactive_norms(model)
            total, loss_sum, correct = 0, 0.0, 0
            for x, y in _iter_epoch(train_stream, epoch):
                x, y = _to_tensor(x), _to_tensor(y)
                logits = model.logits(x)
                if logits.shape != y.shape:
                    raise ShapeMismatch(f"model emits {tuple(logits.shape)}, labels are {tuple(y.shape)}")
                loss = cross_entropy_from_logits(logits, y)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(epoch, float(loss.detach()))
                if opt is not None:
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                loss_sum += float(loss.detach()) * len(x)
                correct += int((logits.detach().argmax(-1) == y.argmax(-1)).sum())
                total += len(x)
            if total == 0:
                raise StreamExhausted(f"training stream yielded no batches in epoch {epoch}")

            val_loss, val_acc = evaluate_loss(model, val_stream, epoch)
            if not math.isfinite(val_loss):
                raise NonFiniteLoss(epoch, val_loss)
            rec = EpochRecord(epoch, loss_sum / total, correct / total, val_loss, val_acc)
            history.records.append(rec)
            log.info("epoch=%d train_loss=%.6f val_loss=%.6f", epoch, rec.train_loss, rec.val_loss)

            if history.best_epoch == epoch:
                best_state = copy.deepcopy(model.state_dict())
                if ckpt_dir is not None:
                    checkpoint_fn(ckpt_dir / "best.pt", model)
            if ckpt_dir is not None:
                checkpoint_fn(ckpt_dir / "last.pt", model)

            if early_stopping_step(history, cfg.patience) == "stop":
                history.stopped_early = epoch < cfg.epochs
                log.info("early stop at epoch %d; best epoch %d", epoch, history.best_epoch)
                break

    if cfg.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history
