"""Task heads' losses and evaluation metrics for the four dense tasks.

Losses operate on tape Tensors (predictions) against numpy labels and
reduce over valid pixels only.  Metrics are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

IGNORE_INDEX = 255

TASK_KINDS = ("semseg", "depth", "normal", "boundary")


@dataclass
class TaskSpec:
    kind: str
    classes: int = 0
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "semseg" and self.classes < 2:
            raise ValueError("semseg task needs classes >= 2")
        if self.loss_weight <= 0:
            raise ValueError("loss weight must be > 0")

    @property
    def out_channels(self) -> int:
        return {"semseg": self.classes, "depth": 1, "normal": 3, "boundary": 1}[self.kind]


def _as_mask(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(valid, dtype=bool)


# ---------------------------------------------------------------------------
# losses (differentiable)


def semseg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy over pixels not labeled IGNORE_INDEX."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    valid = labels != IGNORE_INDEX
    if not valid.any():
        raise ValueError("semseg_loss: no valid pixels")
    if labels[valid].max() >= k or labels[valid].min() < 0:
        raise ValueError(f"semseg_loss: label outside [0, {k}) encountered")
    onehot = np.zeros((n, k, h, w))
    nn_, hh, ww = np.nonzero(valid)
    onehot[nn_, labels[valid], hh, ww] = 1.0
    logp = tape.log_softmax(logits, axis=1)
    picked = tape.tsum(logp * tape.constant(onehot))
    return -picked * (1.0 / valid.sum())


def depth_loss(pred: Tensor, label: np.ndarray, valid=None) -> Tensor:
    """Mean absolute error over valid pixels."""
    label = np.asarray(label, dtype=np.float64)
    mask = _as_mask(valid, label.shape)
    if not mask.any():
        raise ValueError("depth_loss: empty valid mask")
    pred2d = tape.reshape(pred, label.shape)
    diff = tape.tabs(pred2d - tape.constant(label)) * tape.constant(mask.astype(np.float64))
    return tape.tsum(diff) * (1.0 / mask.sum())


def boundary_loss(logits: Tensor, labels: np.ndarray, w_pos: float = 0.95) -> Tensor:
    """Binary cross-entropy with positive-class weight w_pos and negative
    weight (1 - w_pos), computed stably from logits."""
    labels = np.asarray(labels, dtype=np.float64)
    y = tape.constant(labels)
    x = tape.reshape(logits, labels.shape)
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    loss = w_pos * y * tape.softplus(-x) + (1.0 - w_pos) * (1.0 - y) * tape.softplus(x)
    return tape.tmean(loss)


def normalize_vectors(pred: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize along the channel axis with an epsilon floor."""
    sq = tape.tsum(pred * pred, axis=1, keepdims=True)
    return pred / tape.sqrt(sq + eps)


def normal_loss(pred: Tensor, label: np.ndarray, valid=None) -> Tensor:
    """Mean over valid pixels of the per-pixel L1 distance between the
    normalized prediction and the unit label vector."""
    label = np.asarray(label, dtype=np.float64)
    mask = _as_mask(valid, (label.shape[0],) + label.shape[2:])
    if not mask.any():
        raise ValueError("normal_loss: empty valid mask")
    pn = normalize_vectors(pred)
    diff = tape.tsum(tape.tabs(pn - tape.constant(label)), axis=1)
    diff = diff * tape.constant(mask.astype(np.float64))
    return tape.tsum(diff) * (1.0 / mask.sum())


def total_loss(task_losses: dict[str, Tensor], weights: dict[str, float] | None = None,
               kl=None, kd=None, beta: float = 0.0, lambda_kd: float = 0.0) -> Tensor:
    """Weighted sum of task losses plus the bottleneck and distillation
    regularizers: sum_t w_t L_t + beta*KL + lambda_kd*KD."""
    total = tape.constant(0.0)
    for name, loss in task_losses.items():
        w = 1.0 if weights is None else weights.get(name, 1.0)
        total = total + w * loss
    if kl is not None and beta:
        total = total + beta * kl
    if kd is not None and lambda_kd:
        total = total + lambda_kd * kd
    return total


# ---------------------------------------------------------------------------
# metrics (numpy)


def metric_miou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in labels or predictions; ignore
    pixels labeled IGNORE_INDEX."""
    valid = labels != IGNORE_INDEX
    p = pred[valid]
    l = labels[valid]
    ious = []
    for c in range(num_classes):
        pc = p == c
        lc = l == c
        union = np.logical_or(pc, lc).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(pc, lc).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def metric_rmse(pred: np.ndarray, label: np.ndarray, valid=None) -> float:
    mask = _as_mask(valid, np.asarray(label).shape)
    diff = (np.asarray(pred) - np.asarray(label))[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def metric_merr(pred: np.ndarray, label: np.ndarray, valid=None) -> float:
    """Mean angular error in degrees between normalized predicted and
    label vectors (channel axis 1)."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    norm = np.sqrt((pred * pred).sum(axis=1, keepdims=True))
    pn = pred / np.maximum(norm, 1e-12)
    dots = np.clip((pn * label).sum(axis=1), -1.0, 1.0)
    mask = _as_mask(valid, dots.shape)
    return float(np.degrees(np.arccos(dots[mask])).mean())


def metric_boundary_f(prob: np.ndarray, labels: np.ndarray,
                      thresholds: np.ndarray | None = None) -> float:
    """Best dataset-level F1 over a fixed threshold grid with exact pixel
    matching (no tolerance radius)."""
    if thresholds is None:
        thresholds = np.arange(0.01, 1.0, 0.01)
    prob = np.asarray(prob)
    pos = np.asarray(labels) > 0
    best = 0.0
    for thr in thresholds:
        hit = prob >= thr
        tp = np.logical_and(hit, pos).sum()
        fp = np.logical_and(hit, ~pos).sum()
        fn = np.logical_and(~hit, pos).sum()
        denom = 2 * tp + fp + fn
        if denom > 0:
            best = max(best, 2 * tp / denom)
    return float(best)
