"""Synthetic shapes data, SGD training and overlap metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .unet import UNetModel, forward, predict_classes

log = logging.getLogger(__name__)

# One shape type per foreground class, in class order (class 0 is background).
SHAPE_KINDS = ("disc", "rectangle", "ring", "triangle", "cross", "diamond")


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    cx: int  # column
    cy: int  # row
    size: int  # radius or half-extent in pixels


@dataclass
class Sample:
    image: Tensor  # [1, Cin, H, W] in [0, 1]
    label: np.ndarray  # H x W class ids
    shapes: Tuple[Shape, ...] = ()

    def __post_init__(self):
        if self.image.shape[2:] != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} disagree")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    f1: float
    iou: float


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy, r = xx - shape.cx, yy - shape.cy, shape.size
    if shape.kind == "disc":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "rectangle":
        return (np.abs(dx) <= r) & (np.abs(dy) <= (r * 2) // 3)
    if shape.kind == "ring":
        d2 = dx * dx + dy * dy
        inner = r // 2
        return (d2 <= r * r) & (d2 > inner * inner)
    if shape.kind == "triangle":
        # apex up; base on row cy + r
        return (dy <= r) & (dy >= -r) & (2 * np.abs(dx) <= dy + r)
    if shape.kind == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape.kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def synth_dataset(n: int, num_classes: int, height: int, width: int, seed: int = 0,
                  shapes_per_class: int = 1) -> List[Sample]:
    """Noisy background (class 0) with one filled shape type per foreground class."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_classes - 1 > len(SHAPE_KINDS):
        raise ValueError(f"at most {len(SHAPE_KINDS) + 1} classes supported")
    r_min = max(2, min(height, width) // 10)
    r_max = max(r_min, min(height, width) // 6)
    count = (num_classes - 1) * shapes_per_class
    # every shape needs a (2 r_min + 1)^2 box plus a one-pixel gap
    if count * (2 * r_min + 2) ** 2 > height * width or 2 * r_min + 1 > min(height, width):
        raise ValueError(f"{count} shapes exceed a {height}x{width} canvas")

    # each foreground class fills from its own slice of [0.5, 1]
    band = 0.5 / (num_classes - 1)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        image = rng.uniform(0.0, 0.3, size=(height, width))
        label = np.zeros((height, width), dtype=np.int64)
        boxes: List[Tuple[int, int, int, int]] = []
        placed: List[Shape] = []
        for cls in range(1, num_classes):
            for _ in range(shapes_per_class):
                for _attempt in range(500):
                    r = int(rng.integers(r_min, r_max + 1))
                    cx = int(rng.integers(r, width - r))
                    cy = int(rng.integers(r, height - r))
                    box = (cx - r - 1, cy - r - 1, cx + r + 1, cy + r + 1)
                    if all(box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1]
                           for b in boxes):
                        break
                else:
                    raise ValueError(f"could not place {count} shapes on a {height}x{width} canvas")
                boxes.append(box)
                s = Shape(SHAPE_KINDS[cls - 1], cls, cx, cy, r)
                placed.append(s)
                m = shape_mask(s, height, width)
                label[m] = cls
                lo = 0.5 + (cls - 1) * band
                level = rng.uniform(lo + 0.2 * band, lo + 0.8 * band)
                image[m] = level + rng.uniform(-0.03, 0.03, size=int(m.sum()))
        image = np.clip(image, 0.0, 1.0)
        samples.append(Sample(Tensor(image[None, None]), label, tuple(placed)))
    return samples


def split_indices(n: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed 80/10/10 train/val/test index split."""
    perm = np.random.default_rng(seed).permutation(n)
    a, b = int(round(0.8 * n)), int(round(0.9 * n))
    return perm[:a], perm[a:b], perm[b:]


# ---------------------------------------------------------------------------
# Loss, optimiser, metrics
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, label: np.ndarray) -> Tensor:
    return ad.cross_entropy(logits, label)


def sgd_step(model: UNetModel, grads: Dict[str, np.ndarray], lr: float) -> UNetModel:
    missing = [k for k in model.params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for {missing[0]!r}")
    for name, p in model.params.items():
        p -= lr * np.asarray(grads[name])
    return model


def confusion_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes, 3) array of TP, FP, FN per class."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have the same shape")
    cm = np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return np.stack([tp, fp, fn], axis=1)


def per_class_metrics(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> Dict[int, Dict[str, float]]:
    """IoU and F1 for every class present in truth or prediction."""
    out = {}
    for c, (tp, fp, fn) in enumerate(confusion_counts(pred, truth, num_classes)):
        if tp + fp + fn == 0:
            continue
        out[c] = {"iou": tp / (tp + fp + fn), "f1": 2 * tp / (2 * tp + fp + fn)}
    return out


def eval_metrics(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> Dict[str, float]:
    """Macro-averaged F1 and IoU over classes present in truth or prediction."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    per = per_class_metrics(pred, truth, num_classes)
    if not per:
        return {"f1": 1.0, "iou": 1.0}
    return {"f1": float(np.mean([m["f1"] for m in per.values()])),
            "iou": float(np.mean([m["iou"] for m in per.values()]))}


def loss_and_grads(model: UNetModel, sample: Sample) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    logits, _, tape = forward(model, sample.image)
    loss = cross_entropy_loss(logits, sample.label)
    names = list(model.params)
    g = tape.backward(loss, [tape.leaves[k].node for k in names])
    grads = {k: g[tape.leaves[k].node].data for k in names}
    return loss.item(), grads, predict_classes(logits)


def evaluate(model: UNetModel, samples: Sequence[Sample]) -> Dict[str, float]:
    """Metrics pooled over all pixels of ``samples``."""
    preds, truths = [], []
    for s in samples:
        logits, _, _ = forward(model, s.image)
        preds.append(predict_classes(logits))
        truths.append(s.label)
    return eval_metrics(np.stack(preds), np.stack(truths), model.num_classes)


class TrainingDiverged(ValueError):
    """Loss went non-finite; the learning rate is almost always too high."""


def train(model: UNetModel, dataset: Sequence[Sample], config: TrainConfig,
          progress: bool = False) -> Tuple[UNetModel, List[EpochRecord]]:
    """Shuffled single-sample SGD; epoch metrics come from the pre-update predictions."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    history: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        losses, preds, truths = [], [], []
        for idx in order:
            sample = dataset[idx]
            loss, grads, pred = loss_and_grads(model, sample)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch} at lr {config.lr:g}; "
                                       f"try a smaller learning rate")
            sgd_step(model, grads, config.lr)
            losses.append(loss)
            preds.append(pred)
            truths.append(sample.label)
        m = eval_metrics(np.stack(preds), np.stack(truths), model.num_classes)
        rec = EpochRecord(epoch, float(np.mean(losses)), m["f1"], m["iou"])
        history.append(rec)
        if progress:
            log.info("epoch %d loss %.4f f1 %.4f iou %.4f", epoch, rec.loss, rec.f1, rec.iou)
    return model, history


def write_metrics_csv(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "f1", "iou"])
        for r in history:
            w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.f1:.6f}", f"{r.iou:.6f}"])
