"""Differentiable primitives for NCHW feature maps.

Only the operators a U-Net with attention gates needs are provided. Apart
from bias-per-channel and the single-channel attention map in :func:`mul`,
shapes must match exactly.
"""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import InvalidShapeError
from .tensor import Tensor, default_dtype

_ACCUM = {"dtype": np.float64}
_KINK_TRACE: list[list[np.ndarray]] = []


@contextlib.contextmanager
def trace_kinks() -> Iterator[list[np.ndarray]]:
    """Record the branch decisions (ReLU signs, pool winners) of enclosed ops.

    Two evaluations with identical traces lie in the same smooth piece of a
    piecewise-defined function; finite-difference checks rely on this.
    """
    trace: list[np.ndarray] = []
    _KINK_TRACE.append(trace)
    try:
        yield trace
    finally:
        _KINK_TRACE.pop()


def record_kink(decision: np.ndarray) -> None:
    if _KINK_TRACE:
        _KINK_TRACE[-1].append(decision)


@contextlib.contextmanager
def accumulate_in(dtype) -> Iterator[None]:
    """Temporarily change the accumulator precision of convolution reductions.

    The default is float64. Training loops may switch to float32 for speed;
    the stored activations are float32 either way.
    """
    previous = _ACCUM["dtype"]
    _ACCUM["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _ACCUM["dtype"] = previous


def accumulator_dtype():
    return _ACCUM["dtype"]


def _check_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise InvalidShapeError(f"{what} must be 4-D (N, C, H, W), got {t.shape}")


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded cross-correlation; returns (output, column matrix).

    The column matrix has shape (C*kh*kw, N*Ho*Wo) so each row is a
    contiguous copy of one shifted plane.
    """
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    acc = _ACCUM["dtype"]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    if ho <= 0 or wo <= 0:
        raise InvalidShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=acc)
    np.copyto(cols.reshape(c, kh, kw, n, ho, wo), win.transpose(1, 4, 5, 0, 2, 3))
    out = w.reshape(cout, -1).astype(acc) @ cols
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=default_dtype()), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation with stride 1.

    ``padding="same"`` zero-pads so the output keeps the input size;
    ``"valid"`` uses no padding.
    """
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise InvalidShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
    if kh != kw:
        raise InvalidShapeError("conv2d kernels must be square")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    pad = kh // 2 if padding == "same" else 0

    out, cols = _correlate(x.data, weight.data, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        acc = _ACCUM["dtype"]
        gx = gw = gb = None
        if weight.requires_grad:
            g_mat = g.transpose(1, 0, 2, 3).reshape(cout, -1).astype(acc)
            gw = (g_mat @ cols.T).reshape(weight.shape).astype(default_dtype())
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(default_dtype())
        if x.requires_grad:
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(g, flipped, kh - 1 - pad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, "conv2d", inputs, backward_fn, padding=padding)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Pointwise convolution; ``stride`` subsamples the input first."""
    _check_4d(x, "conv1x1 input")
    if weight.data.ndim == 4:
        if weight.shape[2:] != (1, 1):
            raise InvalidShapeError(f"conv1x1 weight must be (Cout, Cin, 1, 1), got {weight.shape}")
        w2 = weight.data.reshape(weight.shape[0], weight.shape[1])
    else:
        w2 = weight.data
    cout, cin = w2.shape
    if x.shape[1] != cin:
        raise InvalidShapeError(f"conv1x1: input has {x.shape[1]} channels, weight expects {cin}")
    if stride not in (1, 2):
        raise ValueError("conv1x1 supports stride 1 or 2")
    acc = _ACCUM["dtype"]
    xs = x.data[:, :, ::stride, ::stride]
    out = np.tensordot(w2.astype(acc), xs.astype(acc), axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (cout,):
            raise InvalidShapeError(f"conv1x1 bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=default_dtype())

    def backward_fn(g: np.ndarray):
        g64 = g.astype(acc)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g64, xs.astype(acc), axes=([0, 2, 3], [0, 2, 3]))
            gw = gw.reshape(weight.shape).astype(default_dtype())
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(default_dtype())
        if x.requires_grad:
            gxs = np.tensordot(w2.astype(acc), g64, axes=([0], [1])).transpose(1, 0, 2, 3)
            if stride == 1:
                gx = np.ascontiguousarray(gxs, dtype=default_dtype())
            else:
                gx = np.zeros(x.shape, dtype=default_dtype())
                gx[:, :, ::stride, ::stride] = gxs
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, "conv1x1", inputs, backward_fn, stride=stride)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    record_kink(positive)
    out = np.where(positive, x.data, 0).astype(default_dtype())
    return Tensor.from_op(out, "relu", (x,), lambda g: (g * positive,), positive=positive)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(default_dtype())
    return Tensor.from_op(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),), output=s)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties go to the first cell in row-major window order."""
    _check_4d(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    record_kink(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=default_dtype())
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return Tensor.from_op(np.ascontiguousarray(out), "maxpool2x2", (x,), backward_fn, argmax=idx)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two in both spatial axes."""
    _check_4d(x, "upsample2x input")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward_fn(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(np.ascontiguousarray(out), "upsample2x", (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat input")
    _check_4d(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise InvalidShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, "concat_channels", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return Tensor.from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    ``b`` may have a single channel, in which case it multiplies every
    channel of ``a`` (the attention-map case).
    """
    broadcast = False
    if a.shape != b.shape:
        if a.data.ndim == 4 and b.data.ndim == 4 and b.shape[1] == 1 and (
            a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]
        ):
            broadcast = True
        else:
            raise InvalidShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward_fn(g: np.ndarray):
        ga = g * b.data
        gb = g * a.data
        if broadcast:
            gb = gb.sum(axis=1, keepdims=True, dtype=np.float64).astype(default_dtype())
        return ga, gb

    return Tensor.from_op(out, "mul_elementwise", (a, b), backward_fn)


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """Affine map ``factor * x + offset``."""
    dt = x.data.dtype.type
    out = x.data * dt(factor) + dt(offset)
    return Tensor.from_op(out, "scale", (x,), lambda g: (g * dt(factor),), factor=factor)


def sum_all(x: Tensor) -> Tensor:
    total = np.float64(x.data.sum(dtype=np.float64))

    def backward_fn(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return Tensor.from_op(total, "sum", (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    total = np.float64(x.data.sum(dtype=np.float64) / n)

    def backward_fn(g: np.ndarray):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return Tensor.from_op(total, "mean", (x,), backward_fn)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant weight array."""
    if weights.shape != x.shape:
        raise InvalidShapeError(f"weighted_sum: weights {weights.shape} vs tensor {x.shape}")
    w = np.asarray(weights, dtype=np.float64)
    total = np.float64((x.data.astype(np.float64) * w).sum())
    return Tensor.from_op(total, "sum", (x,), lambda g: ((g * w).astype(x.data.dtype),))
