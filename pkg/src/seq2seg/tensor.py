"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation the model needs lives in this module.  An
operation computes its forward result with numpy, and when gradients are
enabled and at least one input requires them, records a closure that maps the
output gradient to input gradients.  :func:`backward` collects the recorded
operations reachable from a scalar loss into a :class:`Tape` and replays it in
reverse creation order.

Feature maps are laid out channels-last, ``(N, H, W, C)``.
"""

from __future__ import annotations

import contextlib
import functools
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float32

_ids = itertools.count()
_state = threading.local()


class TensorError(ValueError):
    """Raised on shape mismatches and other invalid tensor arguments."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Compute in ``dtype`` (float32 or float64) inside the block.

    Process-wide rather than per thread.  Meant for gradient checking, where
    float32 rounding swamps central differences; build the model inside the
    block so its parameters have the same dtype.
    """
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported precision {dtype}")
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float32 array that can take part in reverse-mode differentiation.

    Leaves are created directly; non-leaves are produced by the operations in
    this module and remember their parents plus a backward closure until
    :func:`backward` consumes them.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name!r}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ""
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = ""
        t._parents = ()
        t._backward = None
        t._op = ""
        t._id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, op)
    out = Tensor._wrap(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward


class Tape:
    """Operations reachable from a root tensor, ordered by creation.

    Creation order is a topological order of the graph, so walking the tape
    backwards visits every operation after all of its consumers.
    """

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or t._backward is None:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __reversed__(self) -> Iterator[Tensor]:
        return reversed(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls until cleared.  The tape is
    consumed: intermediate nodes drop their parents and closures afterwards.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any tensor that requires grad")
    loss_is_leaf = loss.is_leaf
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape):
        g = grads.pop(node._id, None)
        parents, fn = node._parents, node._backward
        node._parents, node._backward = (), None
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node._op}")
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
            if parent._backward is None:
                leaves[parent._id] = parent
    if loss_is_leaf:
        leaves[loss._id] = loss
    for lid, leaf in leaves.items():
        g = grads[lid].astype(DTYPE, copy=False).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, factor: float) -> Tensor:
    f = DTYPE(factor)
    return _result(a.data * f, (a,), lambda g: (g * f,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise TensorError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def flip(a: Tensor, axis: int) -> Tensor:
    return _result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),), "flip")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(dtype=np.float64)),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(DTYPE),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(
        np.asarray(a.data.mean(dtype=np.float64)),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).astype(DTYPE),),
        "mean",
    )


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat_channels needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise TensorError(
                f"concat_channels shape mismatch: {tensors[0].shape} vs {t.shape}"
            )
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def bw(g):
        return [g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors))]

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, bw, "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(np.matmul(ad, bd), (a, b), bw, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each row (last axis) to zero mean and unit variance, then scale and shift."""
    x = a.data
    c = x.shape[-1]
    if c < 1 or gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (a, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution, resampling, normalisation


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of an ``(N, H, W, Cin)`` map with a ``(k, k, Cin, Cout)`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise TensorError(f"conv2d expects NHWC input and kkIO kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise TensorError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise TensorError(f"invalid stride {stride} / padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise TensorError(
            f"conv2d output size {ho}x{wo} is not positive for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : stride * ho : stride, : stride * wo : stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = g2 @ kmat.T
        if pointwise:
            gx = gcols.reshape(x.shape)
        else:
            gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, cin), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, i, j
                    ]
            gx = gxp[:, padding : padding + h, padding : padding + w]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw, "conv2d")


def interp_matrix(n_in: int, n_out: int, align_corners: bool = True) -> np.ndarray:
    """Linear interpolation weights, shape ``(n_out, n_in)``.

    ``align_corners`` maps the first and last samples onto each other;
    otherwise sample centres are matched (``src = (i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range).
    """
    if n_in < 1 or n_out < 1:
        raise TensorError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    return _interp_matrix(n_in, n_out, align_corners, np.dtype(DTYPE).str)


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or (align_corners and n_out == 1):
        m[:, 0] = 1.0
        m.setflags(write=False)
        return m
    for i in range(n_out):
        if align_corners:
            src = i * (n_in - 1) / (n_out - 1)
        elif n_in == n_out:
            src = float(i)
        else:
            src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)
        lo = min(int(np.floor(src)), n_in - 2)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    """Bilinear resize of an ``(N, H, W, C)`` map (align-corners by default)."""
    if x.ndim != 4:
        raise TensorError(f"bilinear_resize expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    if out_h < 1 or out_w < 1:
        raise TensorError(f"output size must be positive, got {out_h}x{out_w}")
    ry, rx = interp_matrix(h, out_h, align_corners), interp_matrix(w, out_w, align_corners)
    t = np.matmul(ry, x.data.reshape(n, h, w * c))
    out = np.matmul(rx, t.reshape(n * out_h, w, c)).reshape(n, out_h, out_w, c)

    def bw(g):
        gt = np.matmul(rx.T, g.reshape(n * out_h, out_w, c))
        gx = np.matmul(ry.T, gt.reshape(n, out_h, w * c))
        return (gx.reshape(n, h, w, c),)

    return _result(out, (x,), bw, "bilinear_resize")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.count = 0
        self.momentum = momentum


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over the batch and spatial extent of an NHWC map."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"batch_norm2d affine shapes {gamma.shape}/{beta.shape} vs {x.shape}")
    xd = x.data
    gd = gamma.data
    if not training:
        if state.count == 0:
            raise TensorError("batch_norm2d in eval mode before running statistics exist")
        inv = 1.0 / np.sqrt(state.var + DTYPE(eps))
        xhat = (xd - state.mean) * inv

        def bw_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

        return _result(xhat * gd + beta.data, (x, gamma, beta), bw_eval, "batch_norm2d")

    m = xd.size // c
    mu = xd.mean(axis=(0, 1, 2))
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    mom = DTYPE(state.momentum)
    unbiased = var * (m / max(m - 1, 1))
    state.mean = ((1 - mom) * state.mean + mom * mu).astype(DTYPE)
    state.var = ((1 - mom) * state.var + mom * unbiased).astype(DTYPE)
    state.count += 1

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).mean(axis=(0, 1, 2))
        )
        return dx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw, "batch_norm2d")


def cross_entropy_map(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy of ``(..., K)`` logits against integer labels.

    Pixels labelled ``ignore_index`` are excluded from both the sum and the
    count; a map with no scored pixels yields zero loss.
    """
    k = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise TensorError(f"label shape {labels.shape} does not match logits {logits.shape}")
    lab = labels.astype(np.int64).reshape(-1)
    valid = lab != ignore_index
    if np.any((lab[valid] < 0) | (lab[valid] >= k)):
        bad = lab[valid][(lab[valid] < 0) | (lab[valid] >= k)][0]
        raise TensorError(f"label {bad} outside [0, {k}) and not ignore_index {ignore_index}")
    z = logits.data.reshape(-1, k)
    idx = np.nonzero(valid)[0]
    count = idx.size
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, dtype=np.float64))
    if count:
        picked = zs[idx, lab[idx]].astype(np.float64)
        loss = float((lse[idx] - picked).sum() / count)
    else:
        loss = 0.0

    def bw(g):
        gz = np.zeros_like(z)
        if count:
            p = np.exp(zs[idx] - lse[idx, None].astype(DTYPE))
            p[np.arange(count), lab[idx]] -= 1.0
            gz[idx] = p * (g / count)
        return (gz.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``p == 0`` returns the input unchanged."""
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise TensorError(f"dropout probability must be < 1, got {p}")
    mask = (rng.random(a.shape) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "dropout")
