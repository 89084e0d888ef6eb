"""Training and evaluation loops."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from .data import Dataset
from .model import (ConfigError, ExpNet, ModelConfig, coerce_fields, format_key_values,
                    load_checkpoint, parse_key_values, save_checkpoint, training_loss)
from .optim import AdamW, AdamWConfig
from .tensor import backward, no_grad


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # 0 writes only the final checkpoint
    checkpoint_every: int = 0
    # stop once an epoch's running train accuracy reaches this (0 disables)
    stop_at_train_acc: float = 0.0
    # joint gradient-norm ceiling applied before each step (0 disables)
    clip_norm: float = 1.0
    # learning-rate multiplier for the saliency-field parameters
    saliency_lr_scale: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and eps must be positive, weight_decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.clip_norm < 0 or self.saliency_lr_scale < 0:
            raise ConfigError("clip_norm and saliency_lr_scale must be >= 0")
        if self.checkpoint_every < 0 or not 0 <= self.stop_at_train_acc <= 1:
            raise ConfigError("checkpoint_every must be >= 0 and stop_at_train_acc in [0, 1]")

    @classmethod
    def from_text(cls, text: str, source: str = "<train config>") -> "TrainConfig":
        return cls(**coerce_fields(cls, parse_key_values(text, source), source))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        return format_key_values(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)


@dataclass
class EvalResult:
    accuracy: float
    per_class: List[float]
    predictions: np.ndarray

    def format(self) -> str:
        per = " ".join(f"{a:.4f}" for a in self.per_class)
        return f"accuracy={self.accuracy:.4f} per_class={per}"


@dataclass
class TrainResult:
    model: ExpNet
    log: List[str] = field(default_factory=list)
    epochs_run: int = 0
    final_checkpoint: Optional[Path] = None


def predict(model: ExpNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start : start + batch_size]).logits.data
            preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy_from_predictions(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalResult:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) != len(labels) or len(labels) == 0:
        raise ValueError("predictions and labels must be aligned and non-empty")
    per_class = []
    for k in range(num_classes):
        sel = labels == k
        per_class.append(float(np.mean(preds[sel] == k)) if sel.any() else float("nan"))
    return EvalResult(float(np.mean(preds == labels)), per_class, preds)


def evaluate(checkpoint: Union[ExpNet, str, Path], dataset: Dataset) -> EvalResult:
    """Top-1 and per-class accuracy of a model or checkpoint directory."""
    model = checkpoint if isinstance(checkpoint, ExpNet) else load_checkpoint(checkpoint)[0]
    if model.cfg.num_classes != dataset.num_classes:
        raise ValueError(
            f"class-count mismatch: model has {model.cfg.num_classes}, dataset {dataset.num_classes}")
    return accuracy_from_predictions(predict(model, dataset.images), dataset.labels, dataset.num_classes)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          out_dir=None, eval_dataset: Optional[Dataset] = None,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Seeded AdamW training with one log line per epoch.

    Log lines carry no timings so identical runs give identical logs.
    ``progress`` receives each line as soon as its epoch ends.
    """
    if model_config.num_classes != dataset.num_classes:
        raise ValueError(
            f"class-count mismatch: model has {model_config.num_classes}, dataset {dataset.num_classes}")
    if dataset.image_size != model_config.image_size:
        raise ValueError(
            f"image size mismatch: model expects {model_config.image_size}, dataset has {dataset.image_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
    model = ExpNet(model_config)
    saliency = {id(p) for shift in model.shifts if hasattr(shift, "saliency")
                for p in shift.saliency.parameters()}
    params = model.parameters()
    scales = [train_config.saliency_lr_scale if id(p) in saliency else 1.0 for p in params]
    opt = AdamW(params, train_config.optimizer(), scales)
    shuffle = np.random.default_rng(train_config.seed)
    result = TrainResult(model)
    n, bs = len(dataset), train_config.batch_size

    for epoch in range(1, train_config.epochs + 1):
        order = shuffle.permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            opt.zero_grad()
            if not np.all(np.isfinite(dataset.images[idx])):
                # the sampler and threshold would otherwise absorb NaN silently
                raise TrainingError(f"non-finite input at epoch {epoch}, batch {b}")
            output = model(dataset.images[idx])
            loss = training_loss(output, dataset.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss)
            if train_config.clip_norm:
                opt.clip(train_config.clip_norm)
            opt.step()
            total_loss += value * len(idx)
            correct += int(np.sum(np.argmax(output.logits.data, axis=-1) == dataset.labels[idx]))
        train_acc = correct / n
        line = f"epoch={epoch} train_loss={total_loss / n:.6f} train_acc={train_acc:.4f}"
        if eval_dataset is not None:
            line += f" eval_acc={evaluate(model, eval_dataset).accuracy:.4f}"
        result.log.append(line)
        result.epochs_run = epoch
        if progress is not None:
            progress(line)
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(line + "\n")
            if train_config.checkpoint_every and epoch % train_config.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch:04d}", epoch, train_config.seed)
        if train_config.stop_at_train_acc and train_acc >= train_config.stop_at_train_acc:
            break

    if out is not None:
        result.final_checkpoint = save_checkpoint(
            model, out / "checkpoint", result.epochs_run, train_config.seed)
    return result
