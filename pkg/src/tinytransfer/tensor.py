"""Dense tensor kernels.

Float tensors are plain ``numpy.ndarray`` objects in float32, NHWC layout for
images and HWIO layout for convolution kernels. Quantized tensors are
:class:`QTensor` (int8 payload plus a per-tensor scale, zero point fixed at 0).

Convolutions and matrix products accumulate in float64 and round the result to
float32. Every kernel refuses to return non-finite values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeMismatch

PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "relu6", "sigmoid", "softmax")


@dataclass(frozen=True, eq=False)
class QTensor:
    """Symmetric int8 tensor: ``value = scale * q``."""

    q: np.ndarray
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if self.q.dtype != np.int8:
            raise TypeError(f"QTensor payload must be int8, got {self.q.dtype}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"QTensor scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("zero_point is fixed at 0")

    @property
    def shape(self):
        return self.q.shape

    @property
    def size(self):
        return self.q.size

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (
            np.float32(self.scale) == np.float32(other.scale)
            and self.q.shape == other.q.shape
            and np.array_equal(self.q, other.q)
        )


def as_tensor(values, dtype=np.float32) -> np.ndarray:
    """Copy ``values`` into a read-only contiguous array."""
    arr = np.array(values, dtype=dtype, copy=True, order="C")
    arr.setflags(write=False)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) padding; the odd pixel goes after (bottom/right)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < k:
            raise ShapeMismatch(f"valid padding needs input >= kernel ({size} < {k})")
        return (size - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pad_nhwc(x, kh, kw, stride, padding):
    if padding == "valid":
        return x
    top, bottom = same_padding(x.shape[1], kh, stride)
    left, right = same_padding(x.shape[2], kw, stride)
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _check_bias(bias, n, op):
    if bias is None:
        return None
    bias = np.asarray(bias)
    if bias.shape != (n,):
        raise ShapeMismatch(f"{op}: bias shape {bias.shape} != ({n},)")
    return bias


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """2-D convolution (cross-correlation), NHWC input, HWIO kernel."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    bias = _check_bias(bias, cout, "conv2d")
    n, h, w, _ = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = _pad_nhwc(x, kh, kw, stride, padding)
    if kh == kw == 1:
        patches = xp[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :]
        cols = patches.reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, H', W', c, kh, kw
        win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols.astype(np.float64) @ kernel.reshape(kh * kw * cin, cout).astype(np.float64)
    if bias is not None:
        out += bias.astype(np.float64)
    return check_finite(out.reshape(n, ho, wo, cout).astype(np.float32), "conv2d")


def depthwise_conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Per-channel convolution; kernel shape (kh, kw, C, 1)."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[3] != 1:
        raise ShapeMismatch(
            f"depthwise_conv2d expects rank-4 input and (kh,kw,C,1) kernel, got {x.shape}, {kernel.shape}"
        )
    kh, kw, c, _ = kernel.shape
    if x.shape[3] != c:
        raise ShapeMismatch(f"depthwise_conv2d: input has {x.shape[3]} channels, kernel has {c}")
    bias = _check_bias(bias, c, "depthwise_conv2d")
    n, h, w, _ = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = _pad_nhwc(x, kh, kw, stride, padding).astype(np.float64)
    k64 = kernel[..., 0].astype(np.float64)
    out = np.zeros((n, ho, wo, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :] * k64[i, j]
    if bias is not None:
        out += bias.astype(np.float64)
    return check_finite(out.astype(np.float32), "depthwise_conv2d")


def dense(x, weights, bias=None) -> np.ndarray:
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatch(f"dense: cannot multiply {x.shape} by {weights.shape}")
    bias = _check_bias(bias, weights.shape[1], "dense")
    out = x.astype(np.float64) @ weights.astype(np.float64)
    if bias is not None:
        out += bias.astype(np.float64)
    return check_finite(out.astype(np.float32), "dense")


def global_average_pool(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_average_pool expects rank 4, got {x.shape}")
    return check_finite(x.astype(np.float64).mean(axis=(1, 2)).astype(np.float32), "global_average_pool")


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x, kind: str) -> np.ndarray:
    x = np.asarray(x)
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "relu6":
        out = np.minimum(np.maximum(x, 0), 6)
    elif kind == "sigmoid":
        out = sigmoid(x)
    elif kind == "softmax":
        out = softmax(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return check_finite(np.asarray(out, dtype=np.float32), kind)
