"""Losses, SGD with momentum, polynomial LR decay, augmentation and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from . import tensor as T
from .model import SETR, save_checkpoint
from .tensor import Tensor, interp_matrix

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_iters: int = 300
    batch_size: int = 2
    crop_size: int = 64
    poly_power: float = 0.9
    aux_weight: float = 0.4
    seed: int = 0
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip: bool = True
    eval_every: int = 0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.total_iters < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError(f"invalid training config {self}")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"bad resize range [{self.scale_min}, {self.scale_max}]")


def poly_lr(base_lr: float, t: int, total: int, power: float = 0.9) -> float:
    """``base_lr * (1 - t / total) ** power``."""
    if t < 0 or t > total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    if total == 0:
        return float(base_lr)
    return float(base_lr * (1.0 - t / total) ** power)


@dataclass
class OptimizerState:
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place update ``v = momentum*v + g + wd*p; p -= lr*v``.

    Velocity buffers are keyed by position in ``params``, so the parameter
    order must stay fixed across calls.  Missing gradients count as zero.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    mom, wd, step = np.float32(momentum), np.float32(weight_decay), np.float32(lr)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(i)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        v = mom * v + g
        if wd:
            v = v + wd * p.data
        state.velocity[i] = v.astype(np.float32)
        p.data -= step * state.velocity[i]
    state.t += 1


def total_loss(
    logits: Tensor,
    aux_logits: Sequence[Tensor],
    labels: np.ndarray,
    aux_weight: float = 0.4,
    ignore_index: int = IGNORE_INDEX,
) -> Tensor:
    """Main cross-entropy plus ``aux_weight`` times the sum of auxiliary cross-entropies."""
    loss = T.cross_entropy_map(logits, labels, ignore_index)
    if aux_weight and aux_logits:
        aux = T.cross_entropy_map(aux_logits[0], labels, ignore_index)
        for a in aux_logits[1:]:
            aux = T.add(aux, T.cross_entropy_map(a, labels, ignore_index))
        loss = T.add(loss, T.scale(aux, aux_weight))
    return loss


# ---------------------------------------------------------------------------
# augmentation


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Align-corners bilinear resize of an ``(H, W, C)`` array."""
    if img.shape[:2] == (h, w):
        return img
    ry, rx = interp_matrix(img.shape[0], h), interp_matrix(img.shape[1], w)
    return np.einsum("ph,hwc,qw->pqc", ry, img.astype(np.float32), rx, optimize=True).astype(np.float32)


def resize_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize on the align-corners grid; only existing values survive."""
    H, W = labels.shape
    if (H, W) == (h, w):
        return labels

    def src(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.int64)
        return np.floor(np.arange(n_out) * (n_in - 1) / (n_out - 1) + 0.5).astype(np.int64)

    return labels[src(H, h)[:, None], src(W, w)[None, :]]


def augment(
    img: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    crop_size: Union[int, tuple[int, int]],
    scale_range: tuple[float, float] = (0.5, 2.0),
    flip: bool = True,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[np.ndarray, np.ndarray]:
    """Random resize, random crop (padding short sides), random horizontal flip.

    Draws from ``rng`` in a fixed order (ratio, crop offsets, flip) so a
    seeded generator reproduces the same sample.
    """
    ch, cw = (crop_size, crop_size) if isinstance(crop_size, int) else crop_size
    ratio = rng.uniform(*scale_range) if scale_range[0] != scale_range[1] else scale_range[0]
    h = max(1, int(round(img.shape[0] * ratio)))
    w = max(1, int(round(img.shape[1] * ratio)))
    img, labels = resize_image(img, h, w), resize_labels(labels, h, w)
    ph, pw = max(ch - h, 0), max(cw - w, 0)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)))
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=ignore_index)
    y0 = int(rng.integers(0, img.shape[0] - ch + 1))
    x0 = int(rng.integers(0, img.shape[1] - cw + 1))
    img, labels = img[y0 : y0 + ch, x0 : x0 + cw], labels[y0 : y0 + ch, x0 : x0 + cw]
    if flip and rng.random() < 0.5:
        img, labels = img[:, ::-1], labels[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(labels)


# ---------------------------------------------------------------------------
# loop


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class TrainResult:
    losses: list[float]
    rows: list[tuple[int, float, float, Optional[float]]]


def _format_row(row) -> list[str]:
    it, lr, loss, miou = row
    return [str(it), f"{lr:.8g}", f"{loss:.6f}", "" if miou is None else f"{miou:.6f}"]


def train_loop(
    model: SETR,
    dataset: Dataset,
    cfg: TrainConfig,
    evaluate: Optional[Callable[[SETR], float]] = None,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Run ``cfg.total_iters`` SGD steps on random augmented batches.

    Data order and augmentation draw from one generator seeded by
    ``cfg.seed``.  ``evaluate`` (model -> mIoU) runs every ``cfg.eval_every``
    iterations and after the last one; its value fills the ``miou`` column of
    the ``iter,lr,loss,miou`` log.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.parameters()
    state = OptimizerState()
    order: list[int] = []
    losses: list[float] = []
    rows: list[tuple[int, float, float, Optional[float]]] = []
    model.train()
    for it in range(cfg.total_iters):
        lr = poly_lr(cfg.base_lr, it, cfg.total_iters, cfg.poly_power)
        imgs, labs = [], []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            img, lab = dataset[int(order.pop())]
            img, lab = augment(
                img, lab, rng, cfg.crop_size, (cfg.scale_min, cfg.scale_max), cfg.flip, cfg.ignore_index
            )
            imgs.append(img)
            labs.append(lab)
        try:
            out = model(np.stack(imgs))
            loss = total_loss(out.logits, out.aux_logits, np.stack(labs), cfg.aux_weight, cfg.ignore_index)
            model.zero_grad()
            T.backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at iteration {it} (lr {lr:.3g}): {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss {value} at iteration {it} (lr {lr:.3g})")
        sgd_momentum_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay)
        losses.append(value)
        last = it == cfg.total_iters - 1
        miou = None
        if evaluate is not None and (last or (cfg.eval_every and (it + 1) % cfg.eval_every == 0)):
            miou = float(evaluate(model))
            model.train()
            logger.info("iter %d lr %.5f loss %.4f miou %.4f", it + 1, lr, value, miou)
        rows.append((it + 1, lr, value, miou))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "lr", "loss", "miou"])
            writer.writerows(_format_row(r) for r in rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return TrainResult(losses, rows)


# ---------------------------------------------------------------------------
# config files


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce(value: str, like) -> object:
    """Convert a config string to the type of the default ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def train_config_from(values: dict[str, str]) -> TrainConfig:
    defaults = TrainConfig()
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in values:
            kwargs[f.name] = coerce(values[f.name], getattr(defaults, f.name))
    return TrainConfig(**kwargs)
