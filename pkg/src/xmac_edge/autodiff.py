"""Dense tensors with tape-based reverse-mode differentiation.

Operations record a node on the active :class:`Tape` whenever at least one of
their inputs requires a gradient.  ``backward(tape, out)`` replays the tape in
reverse and stores ``dout/dt`` on every tensor that took part and requires a
gradient, intermediates included (Grad-CAM++ needs those).

Forward compute runs in float32.  ``with precision("float64"):`` switches the
default dtype, which is only meant for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Rng",
    "precision",
    "default_dtype",
    "backward",
    "record",
    "no_grad",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm2d",
    "relu",
    "concat_channels",
    "global_avg_pool",
    "linear",
    "softmax",
    "log_softmax",
    "dropout",
    "matmul_batched",
    "add",
    "mul",
    "tensor_sum",
    "reshape",
    "swap_last_axes",
    "bilinear_resize",
]


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype: str | np.dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block append
    their nodes here.  Tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, including onto any enclosing tape."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


def record(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a tensor and log its backward rule on the active tape."""
    stack = _tape_stack()
    tape = stack[-1] if stack else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        tape.nodes.append(Node(tuple(inputs), out, backward_fn, op))
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Populate ``.grad`` with d(output)/d(tensor) for every tracked tensor on ``tape``."""
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    seen: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    for key, t in seen.items():
        t.grad = grads[key]


class Rng:
    """Seeded random stream backed by the counter-based Philox generator.

    ``child(*key)`` derives an independent stream from ``(seed, *key)``, which
    keeps e.g. per-epoch shuffles independent of how many numbers earlier
    epochs consumed.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, *key: int) -> "Rng":
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r.key = self.key + tuple(int(k) for k in key)
        r._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, *r.key])))
        return r

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), bw)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return record("reshape", out, (x,), bw)


def swap_last_axes(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return record("swap_last_axes", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def bw(g):
        return (g * mask,)

    return record("relu", out, (x,), bw)


# ---------------------------------------------------------------- convolution


def _check_conv(name, x, kh, kw, padding, stride):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-D [N,C,H,W], got shape {x.shape}")
    if stride < 1:
        raise ShapeError(f"{name}: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be non-negative, got {padding}")
    _, _, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"{name}: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Zero-padded cross-correlation, [N,Cin,H,W] * [Cout,Cin,Kh,Kw]."""
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D [Cout,Cin,Kh,Kw], got shape {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    ho, wo = _check_conv("conv2d", x, kh, kw, padding, stride)
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    wmat = kernel.data.reshape(cout, -1)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, cin)
    else:
        xp = _pad(x.data, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and padding == 0:
                dxs = dcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
                if stride > 1:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dxs
                else:
                    dx = np.ascontiguousarray(dxs)
            else:
                dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
                dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return (dx, dk) if bias is None else (dx, dk, db)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """One Kh x Kw filter per channel; kernel is [C,1,Kh,Kw]."""
    if kernel.ndim != 4 or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: kernel must be [C,1,Kh,Kw], got shape {kernel.shape}")
    c, _, kh, kw = kernel.shape
    ho, wo = _check_conv("depthwise_conv2d", x, kh, kw, padding, stride)
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"depthwise_conv2d: input has {cx} channels but kernel has {c}")
    xp = _pad(x.data, padding)
    k = kernel.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * k[None, :, i, j, None, None]

    def bw(g):
        dk = None
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    dk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, sl)
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        g * k[None, :, i, j, None, None]
                    )
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dk

    return record("depthwise_conv2d", out, (x, kernel), bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum * old + (1 - momentum) * batch``
    (the running variance uses the unbiased estimate).  In inference mode the
    running statistics are used and the op is affine in ``x``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel (N*H*W >= 2)")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        inv = 1.0 / np.sqrt(running_var.astype(x.data.dtype) + eps)
        xhat = (x.data - running_mean.astype(x.data.dtype).reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    out = out.astype(x.data.dtype, copy=False)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data.reshape(shape)
        if training:
            dx = inv.reshape(shape) * (
                gx - gx.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = gx * inv.reshape(shape)
        return dx, dgamma, dbeta

    return record("batchnorm2d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- reshaping / pooling


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels: both operands must be 4-D [N,C,H,W]")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return record("concat_channels", out, (a, b), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return record("global_avg_pool", out, (x,), bw)


# ---------------------------------------------------------------- dense


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected [N,Din] and [Dout,Din], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input has Din={x.shape[1]} but weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match Dout={weight.shape[0]}")
        out = out + bias.data

    def bw(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bw)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul_batched: operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul_batched: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul_batched: leading batch dims differ, {a.shape[:-2]} vs {b.shape[:-2]}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return record("matmul_batched", out, (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return record("dropout", out, (x,), bw)


# ---------------------------------------------------------------- utilities


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D map with half-pixel (align_corners=False) bilinear sampling."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"bilinear_resize: need a non-empty 2-D map, got shape {arr.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    h, w = arr.shape

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]
