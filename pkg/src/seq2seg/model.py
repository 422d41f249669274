"""The full segmentation model and its checkpoint format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import io as sio
from . import tensor as T
from .decoders import MLAHead, NaiveHead, PUPHead, mla_layers
from .encoder import Encoder, EncoderConfig, EncoderFeatures
from .nn import Module
from .sequentializer import PATCH_SIZE, PatchEmbedding
from .tensor import Tensor

VARIANTS = ("naive", "pup", "mla")

# auxiliary loss placement for a 24-layer encoder
PAPER_AUX_LAYERS = {
    "naive": (10, 15, 20),
    "pup": (10, 15, 20, 24),
    "mla": (6, 12, 18, 24),
}
PAPER_DEPTH = 24


def default_aux_layers(variant: str, depth: int) -> tuple[int, ...]:
    """Auxiliary layers for ``variant``, rescaled proportionally to ``depth``.

    At depth 24 this is the published placement; shallower encoders map each
    layer ``l`` to ``ceil(l * depth / 24)`` with duplicates removed.
    """
    out: list[int] = []
    for l in PAPER_AUX_LAYERS[variant]:
        m = min(depth, max(1, math.ceil(l * depth / PAPER_DEPTH)))
        if m not in out:
            out.append(m)
    return tuple(out)


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    variant: str = "pup"
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = PATCH_SIZE
    decoder_width: int = 256
    mla_streams: int = 4
    aux_layers: Optional[tuple[int, ...]] = None
    norm_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    norm_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown decoder variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {self.patch_size}")
        if self.aux_layers is None:
            self.aux_layers = default_aux_layers(self.variant, self.encoder.layers)
        self.aux_layers = tuple(int(l) for l in self.aux_layers)
        for l in self.aux_layers:
            if not 1 <= l <= self.encoder.layers:
                raise ValueError(f"aux layer {l} outside 1..{self.encoder.layers}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["encoder"] = EncoderConfig(**d["encoder"])
        for key in ("image_size", "aux_layers", "norm_mean", "norm_std"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelOutput:
    logits: Tensor
    aux_logits: list[Tensor] = field(default_factory=list)
    features: Optional[EncoderFeatures] = None


class SETR(Module):
    """Patch embedding, transformer encoder, one decoder and auxiliary heads.

    Inputs are normalised ``(N, H, W, 3)`` images with ``H`` and ``W``
    multiples of the patch size.
    """

    def __init__(self, cfg: ModelConfig, rng: Union[np.random.Generator, int, None] = None):
        super().__init__()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.cfg = cfg
        enc = cfg.encoder
        c, k = enc.hidden, cfg.num_classes
        grid = (cfg.image_size[0] // cfg.patch_size, cfg.image_size[1] // cfg.patch_size)
        self.embed = self.child("embed", PatchEmbedding(rng, c, grid, cfg.patch_size))
        self.encoder = self.child("enc", Encoder(rng, enc))
        if cfg.variant == "naive":
            head = NaiveHead(rng, c, k, cfg.decoder_width)
        elif cfg.variant == "pup":
            head = PUPHead(rng, c, k, cfg.decoder_width)
        else:
            head = MLAHead(rng, c, k, mla_layers(enc.layers, cfg.mla_streams))
        self.decoder = self.child(f"dec.{cfg.variant}", head)
        self.aux_heads = {
            l: self.child(f"aux.layer{l}", NaiveHead(rng, c, k, cfg.decoder_width)) for l in cfg.aux_layers
        }

    def __call__(self, images, keep_attention: bool = False, with_aux: Optional[bool] = None) -> ModelOutput:
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        out_hw = (x.shape[1], x.shape[2])
        e, gh, gw = self.embed(x)
        feats = self.encoder(e, keep_attention)
        if isinstance(self.decoder, MLAHead):
            logits = self.decoder([feats[l] for l in self.decoder.layers], gh, gw, out_hw)
        else:
            logits = self.decoder(feats[len(feats)], gh, gw, out_hw)
        if with_aux is None:
            with_aux = self.training
        aux = [head(feats[l], gh, gw, out_hw) for l, head in self.aux_heads.items()] if with_aux else []
        return ModelOutput(logits, aux, feats)

    def normalize(self, rgb: np.ndarray) -> np.ndarray:
        """uint8 RGB to the float input space the model was trained in."""
        mean = np.asarray(self.cfg.norm_mean, dtype=np.float32)
        std = np.asarray(self.cfg.norm_std, dtype=np.float32)
        return ((np.asarray(rgb, dtype=np.float32) / 255.0 - mean) / std).astype(np.float32)

    def predict_logits(self, img: np.ndarray) -> np.ndarray:
        """Logits ``(H, W, K)`` for one normalised ``(H, W, 3)`` image, eval mode, no graph."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self(img[None], with_aux=False).logits.data[0]
        finally:
            self.train(was_training)
        return out


def save_checkpoint(path: Union[str, Path], model: SETR) -> None:
    tensors = {"meta.config": np.frombuffer(model.cfg.to_json().encode("utf-8"), dtype=np.uint8).astype(np.uint16)}
    tensors.update(model.state_dict())
    sio.save_archive(path, tensors)


def load_checkpoint(path: Union[str, Path]) -> SETR:
    tensors = sio.load_archive(path)
    try:
        raw = tensors.pop("meta.config")
    except KeyError:
        raise sio.CorruptFileError(f"{path}: checkpoint has no meta.config entry") from None
    cfg = ModelConfig.from_json(raw.astype(np.uint8).tobytes().decode("utf-8"))
    model = SETR(cfg, rng=0)
    model.load_state_dict(tensors)
    return model


def build_model(cfg: ModelConfig, seed: int) -> SETR:
    """Model initialised from the weight stream of ``seed``."""
    return SETR(cfg, np.random.default_rng([seed, 0]))


def parameter_count(model: Module) -> int:
    return sum(t.size for t in model.parameters())

