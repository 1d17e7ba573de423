"""Mini-batch training with Adam and best-validation-loss checkpointing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..data import AugmentConfig, Dataset, augment_batch
from ..errors import DivergenceError
from .models import ModelSpec, ParamStore, check_params, logits, loss_and_grads, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: ParamStore, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            for slot, g in enumerate(grads[name]):
                key = (name, slot)
                p = params[name][slot]
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                m, v = self.m[key], self.v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)).astype(p.dtype)


def _one_hot(labels, k, dtype):
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def dataset_loss(model: ModelSpec, params: ParamStore, dataset: Dataset, batch_size=512):
    """Mean cross-entropy and accuracy in inference mode."""
    total, correct = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        z = logits(model, params, x).astype(np.float64)
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        total += float(-logp[np.arange(len(y)), y].sum())
        correct += int((np.argmax(z, axis=1) == y).sum())
    return total / len(dataset), correct / len(dataset)


def train(model: ModelSpec, params: ParamStore, train_set: Dataset, val_set: Dataset, cfg: TrainConfig):
    """Train a copy of ``params``; return the lowest-validation-loss checkpoint and history.

    Data order, dropout masks and augmentation draws all come from one
    generator seeded with ``cfg.seed``, so equal seeds give equal results.
    """
    check_params(model, params)
    for ds in (train_set, val_set):
        if ds.num_classes != model.num_classes:
            raise ValueError(
                f"{ds.split} set has {ds.num_classes} classes, model expects {model.num_classes}"
            )
    work = params.copy()
    best = params.copy()
    best_loss = math.inf
    history = []
    if cfg.epochs == 0:
        return best, history

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    dtype = next(iter(work.arrays.values()))[0].dtype
    n = len(train_set)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        run_loss, run_correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = train_set.images[idx]
            if cfg.augment is not None:
                x = augment_batch(x, cfg.augment, rng)
            x = x[:, None].astype(dtype, copy=False)
            y = train_set.labels[idx]
            loss, grads, probs = loss_and_grads(model, work, x, _one_hot(y, model.num_classes, dtype), rng)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            opt.step(work, grads)
            run_loss += loss * len(idx)
            run_correct += int((probs.argmax(axis=1) == y).sum())

        val_loss, val_acc = dataset_loss(model, work, val_set)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
        rec = {
            "epoch": epoch,
            "loss": run_loss / n,
            "accuracy": run_correct / n,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        }
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, rec["loss"], rec["accuracy"], val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = work.copy()
    return best, history


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    cm = np.asarray(cm)
    n = cm.sum()
    if n == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(float)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return {
        "accuracy": float(tp.sum() / n),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "confusion": cm,
    }


def evaluate(model: ModelSpec, params: ParamStore, dataset: Dataset, predictions=None) -> dict:
    """Accuracy, per-class precision/recall/F1 and the confusion matrix."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if predictions is None:
        predictions = predict(model, params, dataset.images)
    return metrics_from_confusion(confusion_matrix(dataset.labels, predictions, model.num_classes))
