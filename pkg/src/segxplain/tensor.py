"""Dense NCHW tensor kernels: convolution, transposed convolution, activations.

Tensors are plain 4-D numpy arrays laid out (batch, channel, height, width).
Production paths use float32. Every kernel preserves the dtype of its inputs,
so passing float64 arrays gives the 64-bit verification mode used by the
finite-difference and adjointness checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DTYPE = np.float32

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid")
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when tensor shapes disagree with an operation's contract."""


@dataclass(frozen=True)
class ConvGeometry:
    kernel: tuple[int, int] = (4, 4)
    stride: tuple[int, int] = (2, 2)
    padding: tuple[int, int] = (1, 1)

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
            raise ValueError(f"invalid geometry {self}")

    def conv_out(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding[0] - self.kernel[0]) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.kernel[1]) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"convolution of {h}x{w} with {self} has empty output ({oh}x{ow})")
        return oh, ow

    def tconv_out(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - 1) * self.stride[0] - 2 * self.padding[0] + self.kernel[0]
        ow = (w - 1) * self.stride[1] - 2 * self.padding[1] + self.kernel[1]
        if oh < 1 or ow < 1:
            raise ShapeError(f"transposed convolution of {h}x{w} with {self} has empty output ({oh}x{ow})")
        return oh, ow


class ConvGrads(NamedTuple):
    grad_input: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array (n, c, h, w), got shape {np.shape(x)}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def _im2col(x: np.ndarray, geom: ConvGeometry, out_hw: tuple[int, int]) -> np.ndarray:
    """Patch matrix of shape (n*oh*ow, c*kh*kw) for a padded strided sweep."""
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    oh, ow = out_hw
    # pad far enough that every window read stays in bounds
    need_h = max((oh - 1) * sh + kh, h + 2 * ph)
    need_w = max((ow - 1) * sw + kw, w + 2 * pw)
    xp = np.zeros((n, c, need_h, need_w), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], geom: ConvGeometry,
            grid_hw: tuple[int, int]) -> np.ndarray:
    """Scatter-add a (n*gh*gw, c*kh*kw) patch matrix back onto an (n, c, h, w) canvas.

    Reads that fell into the zero padding are dropped.
    """
    n, c, h, w = shape
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    gh, gw = grid_hw
    full_h = max((gh - 1) * sh + kh, h + 2 * ph)
    full_w = max((gw - 1) * sw + kw, w + 2 * pw)
    canvas = np.zeros((n, c, full_h, full_w), dtype=cols.dtype)
    patches = cols.reshape(n, gh, gw, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for dy in range(kh):
        for dx in range(kw):
            canvas[:, :, dy:dy + sh * (gh - 1) + 1:sh, dx:dx + sw * (gw - 1) + 1:sw] += patches[:, :, dy, dx]
    return canvas[:, :, ph:ph + h, pw:pw + w]


def _check_bias(bias, out_c, dtype):
    if bias is None:
        return np.zeros(out_c, dtype=dtype)
    bias = np.asarray(bias)
    if bias.shape != (out_c,):
        raise ShapeError(f"bias shape {bias.shape} does not match {out_c} output channels")
    return bias


def conv2d(x: np.ndarray, weights: np.ndarray, bias, geom: ConvGeometry) -> np.ndarray:
    """Zero-padded strided cross-correlation; weights are (out_c, in_c, kh, kw)."""
    check_tensor(x, "input")
    check_tensor(weights, "weights")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weights.shape
    if in_c != c or (kh, kw) != geom.kernel:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weights {weights.shape} "
                         f"(kernel {geom.kernel})")
    bias = _check_bias(bias, out_c, x.dtype)
    oh, ow = geom.conv_out(h, w)
    out = _im2col(x, geom, (oh, ow)) @ weights.reshape(out_c, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, weights: np.ndarray, geom: ConvGeometry,
                    grad_out: np.ndarray, need_input_grad: bool = True) -> ConvGrads:
    check_tensor(x, "input")
    n, c, h, w = x.shape
    out_c = weights.shape[0]
    oh, ow = geom.conv_out(h, w)
    if grad_out.shape != (n, out_c, oh, ow):
        raise ShapeError(f"conv2d_backward: grad_out {grad_out.shape} != output shape {(n, out_c, oh, ow)}")
    go = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_c)
    cols = _im2col(x, geom, (oh, ow))
    grad_w = (go.T @ cols).reshape(weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        grad_x = np.ascontiguousarray(_col2im(go @ weights.reshape(out_c, -1), x.shape, geom, (oh, ow)))
    return ConvGrads(grad_x, grad_w, grad_b)


def tconv2d(x: np.ndarray, weights: np.ndarray, bias, geom: ConvGeometry) -> np.ndarray:
    """Transposed convolution; weights are (in_c, out_c, kh, kw).

    This is the adjoint of :func:`conv2d` with the same weights and geometry,
    plus a per-channel bias.
    """
    check_tensor(x, "input")
    check_tensor(weights, "weights")
    n, c, h, w = x.shape
    in_c, out_c, kh, kw = weights.shape
    if in_c != c or (kh, kw) != geom.kernel:
        raise ShapeError(f"tconv2d: input {x.shape} incompatible with weights {weights.shape} "
                         f"(kernel {geom.kernel})")
    bias = _check_bias(bias, out_c, x.dtype)
    oh, ow = geom.tconv_out(h, w)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
    out = _col2im(xm @ weights.reshape(in_c, -1), (n, out_c, oh, ow), geom, (h, w))
    out += bias[None, :, None, None]
    return np.ascontiguousarray(out)


def tconv2d_backward(x: np.ndarray, weights: np.ndarray, geom: ConvGeometry,
                     grad_out: np.ndarray, need_input_grad: bool = True) -> ConvGrads:
    check_tensor(x, "input")
    n, c, h, w = x.shape
    out_c = weights.shape[1]
    oh, ow = geom.tconv_out(h, w)
    if grad_out.shape != (n, out_c, oh, ow):
        raise ShapeError(f"tconv2d_backward: grad_out {grad_out.shape} != output shape {(n, out_c, oh, ow)}")
    cols = _im2col(grad_out, geom, (h, w))
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
    grad_w = (xm.T @ cols).reshape(weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        grad_x = np.ascontiguousarray(
            (cols @ weights.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
    return ConvGrads(grad_x, grad_w, grad_b)


def activation(x: np.ndarray, kind: str, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    if kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
        return np.where(x >= 0, x, x * x.dtype.type(alpha))
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(pre: np.ndarray, kind: str, grad_out: np.ndarray,
                        alpha: float = LEAKY_SLOPE, post: np.ndarray | None = None) -> np.ndarray:
    """Chain rule through an activation. The leaky slope at exactly 0 is taken as 1."""
    if pre.shape != grad_out.shape:
        raise ShapeError(f"activation_backward: {pre.shape} vs {grad_out.shape}")
    if kind == "leaky_relu":
        return np.where(pre >= 0, grad_out, grad_out * grad_out.dtype.type(alpha))
    if kind == "relu":
        return np.where(pre > 0, grad_out, 0).astype(grad_out.dtype, copy=False)
    if post is None:
        post = activation(pre, kind)
    if kind == "tanh":
        return grad_out * (1 - post * post)
    if kind == "sigmoid":
        return grad_out * post * (1 - post)
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, c_a: int) -> tuple[np.ndarray, np.ndarray]:
    check_tensor(x, "x")
    if not 1 <= c_a < x.shape[1]:
        raise ShapeError(f"split point {c_a} outside 1..{x.shape[1] - 1}")
    return x[:, :c_a].copy(), x[:, c_a:].copy()
