"""Synthetic segmentation data and the on-disk dataset layout.

A dataset root looks like::

    root/dataset.cfg          key = value metadata (num_classes, size, seed, ...)
    root/train/0000.ppm       P6 image
    root/train/0000.pgm       P5 label map (or 0000.sttn, uint16, when K > 256)
    root/val/...
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import io as sio
from .training import IGNORE_INDEX, parse_config

PathLike = Union[str, Path]
SPLITS = ("train", "val")


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    num_classes: int = 4
    min_shapes: int = 2
    max_shapes: int = 5
    noise: float = 0.04
    seed: int = 0
    train: int = 4
    val: int = 1

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise ValueError(f"image size {self.size} must be a positive multiple of 16")
        if self.num_classes < 2:
            raise ValueError("need at least two classes (background + one shape class)")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        if self.train < 0 or self.val < 0:
            raise ValueError("image counts must be non-negative")


@dataclass
class DatasetIndex:
    root: Path
    split: str
    images: list[Path]
    labels: list[Path]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def class_palette(num_classes: int) -> np.ndarray:
    """Class colours: class 0 dark gray, the rest evenly spaced saturated hues."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    pal[0] = (40, 40, 40)
    for k in range(1, num_classes):
        r, g, b = colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.85, 0.95)
        pal[k] = np.rint(np.array([r, g, b]) * 255)
    return pal


def _class_texture(k: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Per-class oriented sinusoid so classes also differ in local texture."""
    angle = 0.7 * k
    freq = 0.15 + 0.07 * (k % 4)
    return np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy))


def render_sample(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``(rgb uint8, labels uint16)`` pair drawn from ``rng``.

    Shapes are painted in order so later ones occlude earlier ones.  About a
    third of the shapes are stripes spanning the whole image.
    """
    s, k = spec.size, spec.num_classes
    pal = class_palette(k).astype(np.float64)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    labels = np.zeros((s, s), dtype=np.uint16)
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, k))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            h, w = rng.integers(s // 8, s // 2 + 1, size=2)
            y0, x0 = rng.integers(0, s - h + 1), rng.integers(0, s - w + 1)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:
            cy, cx = rng.uniform(0, s, size=2)
            ry, rx = rng.uniform(s / 10, s / 3, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            width = int(rng.integers(max(2, s // 16), s // 5 + 1))
            start = int(rng.integers(0, s - width + 1))
            coord = yy if rng.random() < 0.5 else xx
            mask = (coord >= start) & (coord < start + width)
        labels[mask] = cls
    img = pal[labels]
    for c in range(k):
        m = labels == c
        if m.any():
            img[m] += 18.0 * _class_texture(c, yy[m], xx[m])[:, None]
    img += rng.normal(0.0, spec.noise * 255.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels


def _write_meta(root: Path, spec: SynthSpec) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(spec).items()]
    (root / "dataset.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def label_suffix(num_classes: int) -> str:
    return ".pgm" if num_classes <= 256 else ".sttn"


def write_labels(path: Path, labels: np.ndarray, num_classes: int) -> None:
    if path.suffix == ".pgm":
        sio.write_pgm(path, labels.astype(np.uint8))
    else:
        sio.save_tensor(path, labels.astype(np.uint16))


def read_labels(path: Path) -> np.ndarray:
    if path.suffix == ".pgm":
        return sio.read_pgm(path).astype(np.uint16)
    arr = sio.load_tensor(path)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise sio.CorruptFileError(f"{path}: label tensor must be 2-D uint16, got {arr.dtype} {arr.shape}")
    return arr


def generate_synth(spec: SynthSpec, root: PathLike) -> dict[str, DatasetIndex]:
    """Write the train and val splits under ``root`` and return their indices.

    Each image is rendered from its own generator seeded by
    ``(seed, split, i)``, so the output is a pure function of ``spec``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _write_meta(root, spec)
    suffix = label_suffix(spec.num_classes)
    for split_id, (split, count) in enumerate((("train", spec.train), ("val", spec.val))):
        d = root / split
        d.mkdir(exist_ok=True)
        for i in range(count):
            rgb, lab = render_sample(spec, np.random.default_rng([spec.seed, split_id, i]))
            sio.write_ppm(d / f"{i:04d}.ppm", rgb)
            write_labels(d / f"{i:04d}{suffix}", lab, spec.num_classes)
    return {split: load_index(root, split) for split in SPLITS}


def load_index(root: PathLike, split: str = "train") -> DatasetIndex:
    root = Path(root)
    cfg_path = root / "dataset.cfg"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{root} is not a dataset directory (no dataset.cfg)")
    meta = parse_config(cfg_path.read_text(encoding="utf-8"))
    k = int(meta["num_classes"])
    images = sorted((root / split).glob("*.ppm"))
    labels = []
    for img in images:
        lab = img.with_suffix(label_suffix(k))
        if not lab.is_file():
            raise FileNotFoundError(f"missing label map {lab}")
        labels.append(lab)
    return DatasetIndex(root, split, images, labels, k, meta)


def load_raw_pair(index: DatasetIndex, i: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= i < len(index):
        raise IndexError(f"pair {i} outside 0..{len(index) - 1}")
    rgb = sio.read_ppm(index.images[i])
    lab = read_labels(index.labels[i])
    if rgb.shape[:2] != lab.shape:
        raise ValueError(f"{index.images[i].name}: image {rgb.shape[:2]} vs labels {lab.shape}")
    bad = (lab >= index.num_classes) & (lab != IGNORE_INDEX)
    if bad.any():
        raise ValueError(f"{index.labels[i].name}: label {int(lab[bad][0])} >= {index.num_classes}")
    return rgb, lab


def normalize(rgb: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return ((rgb.astype(np.float32) / 255.0 - mean) / std).astype(np.float32)


def load_pair(index: DatasetIndex, i: int, mean=None, std=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalised float32 image and uint16 label map of pair ``i``.

    Without explicit statistics the image is scaled to [0, 1] and centred
    per channel on its own mean.
    """
    rgb, lab = load_raw_pair(index, i)
    if mean is None:
        mean = (rgb.reshape(-1, 3) / 255.0).mean(axis=0)
    if std is None:
        std = (1.0, 1.0, 1.0)
    return normalize(rgb, mean, std), lab


def channel_stats(index: DatasetIndex) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of ``[0, 1]``-scaled pixels over a split."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for i in range(len(index)):
        px = sio.read_ppm(index.images[i]).reshape(-1, 3).astype(np.float64) / 255.0
        total += px.sum(axis=0)
        sq += (px * px).sum(axis=0)
        n += len(px)
    if n == 0:
        return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


class SegmentationDataset:
    """Normalised pairs of one split, loaded once and kept in memory."""

    def __init__(self, index: DatasetIndex, mean, std):
        self.index = index
        self.pairs = [load_raw_pair(index, i) for i in range(len(index))]
        self.mean, self.std = mean, std

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        rgb, lab = self.pairs[i]
        return normalize(rgb, self.mean, self.std), lab

    @property
    def num_classes(self) -> int:
        return self.index.num_classes


def synth_spec_from(values: dict[str, str], base: Optional[SynthSpec] = None) -> SynthSpec:
    from .training import coerce

    base = base or SynthSpec()
    current = asdict(base)
    for key, raw in values.items():
        current[key] = coerce(raw, current[key])
    return SynthSpec(**current)
