"""Sliding-window and multi-scale inference, confusion matrices and mIoU.

``model`` arguments are callables mapping a normalised ``(h, w, 3)`` float
image to ``(h, w, K)`` logits, e.g. ``SETR.predict_logits``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .training import IGNORE_INDEX, resize_image

Predictor = Callable[[np.ndarray], np.ndarray]

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


def snap16(n: float, multiple: int = 16) -> int:
    """Nearest positive multiple of ``multiple`` (ties round up)."""
    return max(multiple, int(math.floor(n / multiple + 0.5)) * multiple)


def _window_starts(size: int, window: int, stride: int) -> list[int]:
    if size <= window:
        return [0]
    n = math.ceil((size - window) / stride) + 1
    return sorted({min(i * stride, size - window) for i in range(n)})


def sliding_window_infer(model: Predictor, img: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Average window logits over an image; returns ``(H, W, K)``.

    An image that fits inside one window is evaluated whole.  Otherwise, if its
    shorter side is below ``window`` it is rescaled (aspect kept, sides snapped
    to multiples of 16) so the shorter side equals ``window``, and the averaged
    logits are resized back to ``H x W``.  Windows step by ``stride``; the last
    one in each direction abuts the image edge.
    """
    if window % 16:
        raise ValueError(f"window {window} is not a multiple of 16")
    if stride <= 0 or stride > window:
        raise ValueError(f"stride must be in (0, {window}], got {stride}")
    H, W = img.shape[:2]
    if H <= window and W <= window:
        return model(img)
    work = img
    if min(H, W) < window:
        s = window / min(H, W)
        h2 = window if H < W else snap16(H * s)
        w2 = window if W <= H else snap16(W * s)
        work = resize_image(img, h2, w2)
    h, w = work.shape[:2]
    total: Optional[np.ndarray] = None
    count = np.zeros((h, w, 1), dtype=np.float32)
    for y in _window_starts(h, window, stride):
        for x in _window_starts(w, window, stride):
            out = model(work[y : y + window, x : x + window])
            if total is None:
                total = np.zeros((h, w, out.shape[-1]), dtype=np.float32)
            total[y : y + window, x : x + window] += out
            count[y : y + window, x : x + window] += 1
    logits = total / count
    return resize_image(logits, H, W) if (h, w) != (H, W) else logits


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def multi_scale_logits(
    model: Predictor,
    img: np.ndarray,
    scales: Sequence[float] = DEFAULT_SCALES,
    flip: bool = True,
    window: int = 64,
    stride: Optional[int] = None,
    average: str = "logits",
) -> np.ndarray:
    """Averaged ``(H, W, K)`` scores over scales and (optionally) horizontal flips.

    Each scaled size is snapped to the nearest multiple of 16.  ``average`` is
    ``"logits"`` or ``"probs"`` (softmax before averaging).
    """
    if not scales:
        raise ValueError("need at least one scale")
    if average not in ("logits", "probs"):
        raise ValueError(f"average must be 'logits' or 'probs', got {average!r}")
    stride = stride if stride is not None else default_stride(window)
    H, W = img.shape[:2]
    acc: Optional[np.ndarray] = None
    n = 0
    for s in scales:
        h, w = snap16(H * s), snap16(W * s)
        scaled = resize_image(img, h, w)
        views = [scaled, np.ascontiguousarray(scaled[:, ::-1])] if flip else [scaled]
        for v, view in enumerate(views):
            out = sliding_window_infer(model, view, window, stride)
            if v:
                out = out[:, ::-1]
            out = resize_image(out, H, W)
            if average == "probs":
                out = _softmax(out)
            acc = out.astype(np.float32) if acc is None else acc + out
            n += 1
    return acc / np.float32(n)


def multi_scale_infer(
    model: Predictor,
    img: np.ndarray,
    scales: Sequence[float] = DEFAULT_SCALES,
    flip: bool = True,
    window: int = 64,
    stride: Optional[int] = None,
    average: str = "logits",
) -> np.ndarray:
    """Segmentation map ``(H, W)`` (uint16); ties go to the lowest class index."""
    scores = multi_scale_logits(model, img, scales, flip, window, stride, average)
    return scores.argmax(axis=-1).astype(np.uint16)


def default_stride(window: int) -> int:
    return max(1, (2 * window) // 3)


# ---------------------------------------------------------------------------
# metrics


class ConfusionMatrix:
    """``K x K`` counts indexed ``[true][pred]``."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        update_confusion(self, pred, truth)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update_confusion(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    k = cm.num_classes
    keep = truth != cm.ignore_index
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= k or t.min() < 0):
        raise ValueError(f"ground-truth class {int(t.max())} outside [0, {k})")
    if p.size and (p.max() >= k or p.min() < 0):
        raise ValueError(f"predicted class {int(p.max())} outside [0, {k})")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


@dataclass
class Metrics:
    miou: float
    per_class: list[Optional[float]]
    pixel_acc: float
    empty: bool = False


def compute_miou(cm: ConfusionMatrix) -> Metrics:
    """Per-class IoU, their mean over classes that occur, and pixel accuracy.

    Classes absent from both truth and prediction get ``None`` and are left out
    of the mean.  An all-zero matrix gives ``(0, [], 0)`` with ``empty`` set.
    """
    c = cm.counts
    total = c.sum()
    if total == 0:
        warnings.warn("confusion matrix is empty", RuntimeWarning, stacklevel=2)
        return Metrics(0.0, [], 0.0, empty=True)
    inter = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    per_class = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    present = [v for v in per_class if v is not None]
    return Metrics(float(np.mean(present)), per_class, float(inter.sum() / total))


def evaluate_dataset(
    model: Predictor,
    pairs,
    num_classes: int,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    window: int = 64,
    stride: Optional[int] = None,
    average: str = "logits",
) -> tuple[Metrics, ConfusionMatrix, list[np.ndarray]]:
    """Run :func:`multi_scale_infer` over ``(image, labels)`` pairs and score them."""
    cm = ConfusionMatrix(num_classes)
    preds = []
    for img, lab in pairs:
        pred = multi_scale_infer(model, img, scales, flip, window, stride, average)
        cm.update(pred, lab)
        preds.append(pred)
    return compute_miou(cm), cm, preds
