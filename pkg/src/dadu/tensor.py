"""Rank-4 tensors with define-by-run reverse-mode differentiation.

Every op in this module takes and returns :class:`Tensor` objects laid out as
``(batch, channel, height, width)``. When a :class:`Tape` is active and any
input requires a gradient, the op appends a node holding its backward rule;
:func:`backward` replays those rules in reverse order.

Values default to float32. Passing float64 arrays in keeps every op in
float64, which is what the finite-difference checks rely on.
"""

from __future__ import annotations

import math
import weakref
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    pass


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int


class Tensor:
    """Dense array plus an optional accumulated gradient.

    ``data`` is a numpy array, usually rank 4. Parameters (biases, batchnorm
    affine vectors) are the rank-1 exception.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None  # weakref to the producing Tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def shape4(self) -> Shape4:
        if self.data.ndim != 4:
            raise ShapeError(f"expected a rank-4 tensor, got shape {self.data.shape}")
        return Shape4(*self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op})"


_active: list["Tape"] = []


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        output.requires_grad = True
        output._tape = weakref.ref(self)
        self.nodes.append(Node(op, inputs, output, backward))

    def consumers(self, t: Tensor) -> list[Node]:
        return [node for node in self.nodes if any(x is t for x in node.inputs)]


# When set, piecewise ops (relu, max selections) append their branch choices
# here; gradient checks use it to spot perturbations that cross a kink.
_branch_log: Optional[list] = None


class record_branches:
    def __enter__(self) -> list:
        global _branch_log
        self._prev = _branch_log
        _branch_log = []
        return _branch_log

    def __exit__(self, *exc) -> None:
        global _branch_log
        _branch_log = self._prev


def _log_branch(arr: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(hash(np.ascontiguousarray(arr).tobytes()))


def current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> Tensor:
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so calling this twice
    without zeroing doubles them.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"loss must have shape (1, 1, 1, 1), got {loss.data.shape}")
    producer = loss._tape() if loss._tape is not None else None
    if tape is None:
        tape = producer
    if tape is None or producer is not tape:
        raise TapeError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                seen[key] = inp
    for key, g in grads.items():
        t = seen[key]
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _check4(x: Tensor, what: str) -> Shape4:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (n, c, h, w) input, got shape {x.data.shape}")
    return Shape4(*x.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; either operand may broadcast over size-1 axes."""
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may broadcast over size-1 axes.

    The two broadcasts the network uses are a channel gate ``[n, c, 1, 1]``
    and a spatial gate ``[n, 1, h, w]`` against a full ``[n, c, h, w]`` map.
    """
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), out, back)


elementwise_add = add
elementwise_mul = mul


def scale(x: Tensor, k: float) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(k))
    return _record("scale", (x,), out, lambda g: (g * k,))


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, returned as a ``(1, 1, 1, 1)`` scalar."""
    shape = x.shape
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1))
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    out = Tensor(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False))
    return _record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so results stay strictly inside (0, 1).

    Without the clip float32 rounds sigmoid(17) to exactly 1.0.
    """
    dt = x.data.dtype
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = np.clip(y, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0))).astype(dt, copy=False)
    out = Tensor(y)
    return _record("sigmoid", (x,), out, lambda g: (g * y * (1 - y),))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, padding {padding} "
            f"does not give an integral output extent")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` with ``kernel`` of shape ``[outC, inC, kH, kW]``."""
    n, c, h, w = _check4(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got {kernel.shape}")
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: kernel expects {ic} input channels, input has {c} (input {x.shape}, kernel {kernel.shape})")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({oc},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    kmat = kernel.data.reshape(oc, ic * kh * kw)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (n, c, ho, wo, kh, kw) -> (n, c*kh*kw, ho*wo)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)

    y = np.matmul(kmat, cols)
    if bias is not None:
        y += bias.data[None, :, None]
    out = Tensor(y.reshape(n, oc, ho, wo))

    def back(g):
        g = g.reshape(n, oc, ho * wo)
        gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        if not x.requires_grad:
            return None, gk, gb
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            return np.matmul(kmat.T, g).reshape(x.shape), gk, gb
        if stride == 1 and oc <= c and padding <= min(kh, kw) - 1:
            # full correlation of the output gradient with the flipped kernel;
            # cheaper than scattering c*kh*kw columns when oc <= c
            pad_h, pad_w = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g.reshape(n, oc, ho, wo), ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 4, 5, 2, 3)).reshape(n, oc * kh * kw, h * w)
            kflip = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
            return np.matmul(kflip, gcols).reshape(x.shape), gk, gb
        gcols = np.matmul(kmat.T, g).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is None:
        return _record("conv2d", inputs, out, lambda g: back(g)[:2])
    return _record("conv2d", inputs, out, back)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd extents are handled by replicating the last row/column. On ties the
    first cell in row-major order wins and receives the whole gradient.
    """
    if window != 2 or stride != 2:
        raise ShapeError("maxpool2d supports only window=2, stride=2")
    n, c, h, w = _check4(x, "maxpool2d")
    xd = x.data
    if h % 2 or w % 2:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), mode="edge")
    hp, wp = xd.shape[2], xd.shape[3]
    ho, wo = hp // 2, wp // 2
    blocks = xd.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    _log_branch(idx)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0])

    def back(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        if hp != h:
            gx[:, :, h - 1, :] += gx[:, :, h, :]
        if wp != w:
            gx[:, :, :, w - 1] += gx[:, :, :, w]
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return _record("maxpool2d", (x,), out, back)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _check4(x, "global_avg_pool")
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    inv = 1.0 / (h * w)
    return _record("global_avg_pool", (x,), out,
                   lambda g: (np.broadcast_to(g * inv, x.shape).astype(g.dtype),))


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = _check4(x, "global_max_pool")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    _log_branch(idx)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1))

    def back(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return _record("global_max_pool", (x,), out, back)


def channelwise_avg(x: Tensor) -> Tensor:
    n, c, h, w = _check4(x, "channelwise_avg")
    out = Tensor(x.data.mean(axis=1, keepdims=True))
    return _record("channelwise_avg", (x,), out,
                   lambda g: (np.broadcast_to(g / c, x.shape).astype(g.dtype),))


def channelwise_max(x: Tensor) -> Tensor:
    _check4(x, "channelwise_max")
    idx = x.data.argmax(axis=1)[:, None]
    _log_branch(idx)
    out = Tensor(np.take_along_axis(x.data, idx, axis=1))

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _record("channelwise_max", (x,), out, back)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    statistics (numpy arrays, updated in place) track them by an exponential
    moving average with unbiased variance. In eval mode the running
    statistics are used as constants.
    """
    n, c, h, w = _check4(x, "batchnorm2d")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    count = n * h * w
    xd = x.data
    if training:
        if count < 2:
            raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = Tensor(xhat * gd + beta.data[None, :, None, None])

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = (inv_std[None, :, None, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gbeta

    return _record("batchnorm2d", (x, gamma, beta), out, back)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    shapes = [_check4(p, "concat_channels") for p in parts]
    n, _, h, w = shapes[0]
    for s in shapes[1:]:
        if (s.n, s.h, s.w) != (n, h, w):
            raise ShapeError(f"concat_channels: mismatched extents {[tuple(s) for s in shapes]}")
    if len(parts) == 1:
        return parts[0]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum([0] + [s.c for s in shapes])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_channels", parts, out, back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = _check4(x, "slice_channels")
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: invalid range [{start}, {stop}) for {c} channels")
    out = Tensor(x.data[:, start:stop].copy())

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice_channels", (x,), out, back)


def interpolation_matrix(size: int, factor: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Linear interpolation weights ``[size*factor, size]`` (half-pixel centres)."""
    out = size * factor
    mat = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling by an integer factor, align-corners false."""
    n, c, h, w = _check4(x, "upsample_bilinear")
    if factor < 1:
        raise ShapeError("upsample_bilinear: factor must be >= 1")
    if factor == 1:
        return x
    uh = interpolation_matrix(h, factor, x.data.dtype)
    uw = interpolation_matrix(w, factor, x.data.dtype)
    out = Tensor(np.matmul(np.matmul(uh, x.data), uw.T))
    return _record("upsample_bilinear", (x,), out, lambda g: (np.matmul(np.matmul(uh.T, g), uw),))
