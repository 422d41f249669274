"""Parameter containers and the small layers shared by encoder and decoders."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(T.DTYPE)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(T.DTYPE)


class Module:
    """Owns named parameters, batch-norm buffers and child modules.

    Names are registered explicitly so checkpoint keys stay stable
    (``enc.layer3.wq`` rather than whatever attribute layout a class uses).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for mod in self._children.values():
            yield from mod.modules()

    def train(self, mode: bool = True) -> "Module":
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def _buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self._children.items():
            yield from mod._buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.named_parameters()}
        out.update(self._buffers(""))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]
        for mod, prefix in self._with_prefixes(""):
            if isinstance(mod, BatchNorm2d):
                mod.load_buffers(state, prefix)

    def _with_prefixes(self, prefix: str):
        yield self, prefix
        for name, mod in self._children.items():
            yield from mod._with_prefixes(f"{prefix}{name}.")


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.state = T.BatchNormState(channels, momentum)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.state, self.training, self.eps)

    def _buffers(self, prefix: str):
        yield prefix + "running_mean", self.state.mean.copy()
        yield prefix + "running_var", self.state.var.copy()
        yield prefix + "count", np.array([self.state.count], dtype=np.float32)

    def load_buffers(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.state.mean = state[prefix + "running_mean"].astype(T.DTYPE).copy()
        self.state.var = state[prefix + "running_var"].astype(T.DTYPE).copy()
        self.state.count = int(state[prefix + "count"].reshape(-1)[0])


class Conv2d(Module):
    """``k x k`` convolution, same padding, He-initialised kernel."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int, bias: bool = False):
        super().__init__()
        self.weight = self.param("weight", he_normal(rng, (k, k, cin, cout), k * k * cin))
        self.bias: Optional[Tensor] = self.param("bias", np.zeros(cout)) if bias else None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class ConvBNReLU(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int):
        super().__init__()
        self.conv = self.child("conv", Conv2d(rng, cin, cout, k))
        self.bn = self.child("bn", BatchNorm2d(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
