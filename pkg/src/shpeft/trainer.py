"""Masked SGD fine-tuning with a cosine-annealed learning rate, plus metrics."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import DatasetHandle, batch_iter, epoch_seed
from .masking import Mask
from .models import Model


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_min: float = 0.0
    iterations: int = 2000
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr_min > self.lr0 or self.lr_min < 0:
            raise ValueError("need 0 <= lr_min <= lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Metrics:
    macro_f1: float
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: int) -> "Metrics":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        conf = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(conf, (y_true, y_pred), 1)
        tp = np.diag(conf).astype(np.float64)
        pred_n = conf.sum(axis=0)
        true_n = conf.sum(axis=1)
        precision = np.divide(tp, pred_n, out=np.zeros(classes), where=pred_n > 0)
        recall = np.divide(tp, true_n, out=np.zeros(classes), where=true_n > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros(classes), where=denom > 0)
        total = conf.sum()
        acc = float(tp.sum() / total) if total else 0.0
        return cls(float(f1.mean()), acc, precision, recall, f1, conf)

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(d["macro_f1"], d["accuracy"], np.asarray(d["precision"]), np.asarray(d["recall"]),
                   np.asarray(d["f1"]), np.asarray(d["confusion"], dtype=np.int64))


@dataclass
class TrainReport:
    loss_curve: list
    final_metrics: Metrics | None
    steps: int
    config: dict
    mask_digest: str
    trainable: int = 0

    def to_dict(self) -> dict:
        return {
            "loss_curve": [float(v) for v in self.loss_curve],
            "final_metrics": None if self.final_metrics is None else self.final_metrics.to_dict(),
            "steps": self.steps,
            "config": self.config,
            "mask_digest": self.mask_digest,
            "trainable": self.trainable,
        }


def mask_digest(mask: Mask) -> str:
    h = hashlib.sha256(np.packbits(mask.bits, bitorder="little").tobytes())
    return h.hexdigest()[:16]


def cosine_lr(t: int, T: int, lr0: float, lr_min: float = 0.0) -> float:
    if T <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / T))


def masked_sgd_step(model: Model, grads: np.ndarray, mask: Mask | np.ndarray, lr: float) -> Model:
    """``w <- w - lr * g`` on the masked elements only; the rest is untouched."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if grads.shape != model.bundle.flat.shape or bits.shape != grads.shape:
        raise ValueError("grads and mask must align with the parameter registry")
    idx = np.flatnonzero(bits)
    flat = model.bundle.flat
    new = flat[idx] - model.dtype(lr) * grads[idx].astype(model.dtype, copy=False)
    if not np.all(np.isfinite(new)):
        bad = model.registry.entry_at(int(idx[np.flatnonzero(~np.isfinite(new))[0]]))
        raise FloatingPointError(f"non-finite update in {bad.name}")
    flat[idx] = new
    return model


def _batches(dataset: DatasetHandle, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from batch_iter(dataset, batch_size, epoch_seed(seed, epoch))
        epoch += 1


def masked_loss_and_grad(model: Model, x, y, trainable: set | None = None) -> tuple[float, np.ndarray]:
    """Like :meth:`Model.loss_and_grad`, but skips weight gradients of
    parameters with no trainable element (their flat grad is zero)."""
    if trainable is None:
        return model.loss_and_grad(x, y)
    params = {e.name: ad.Tensor(model.bundle.view(e.name), requires_grad=e.name in trainable, name=e.name)
              for e in model.registry}
    loss = ad.cross_entropy_with_logits(model.forward(x, params), y)
    if loss.requires_grad:
        ad.backward_pass(loss, leaves=[p for p in params.values() if p.requires_grad])
    return float(loss.data), model.flat_grad(params)


def train(model: Model, dataset: DatasetHandle, mask: Mask, config: TrainConfig,
          eval_dataset: DatasetHandle | None = None) -> tuple[Model, TrainReport]:
    """Run ``config.iterations`` masked SGD steps on a copy of ``model``."""
    config.validate()
    if dataset.classes != model.classes:
        raise ValueError(f"model has {model.classes} outputs, dataset has {dataset.classes} classes")
    if len(mask) != model.n_params:
        raise ValueError("mask does not align with the model registry")
    model = model.copy()
    trainable = {e.name for e in model.registry if mask.bits[e.offset:e.stop].any()}
    stream = _batches(dataset, config.batch_size, config.seed)
    curve = []
    T = config.iterations
    for t in range(T):
        x, y = next(stream)
        loss, g = masked_loss_and_grad(model, x, y, trainable)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {t}")
        curve.append(loss)
        lr = cosine_lr(t, T, config.lr0, config.lr_min) if config.schedule == "cosine" else config.lr0
        masked_sgd_step(model, g, mask, lr)
    metrics = evaluate(model, eval_dataset) if eval_dataset is not None else None
    report = TrainReport(curve, metrics, T, config.to_dict(), mask_digest(mask), mask.trainable)
    return model, report


def predict(model: Model, dataset: DatasetHandle, batch_size: int = 500) -> np.ndarray:
    preds = []
    for start in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.x[start:start + batch_size]).data
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(model: Model, dataset: DatasetHandle) -> Metrics:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return Metrics.from_predictions(dataset.y, predict(model, dataset), dataset.classes)
