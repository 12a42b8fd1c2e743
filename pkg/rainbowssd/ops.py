"""
Differentiable dense ops on (n, c, h, w) tensors.

Convolutions use an im2col formulation built from strided window views;
transposed convolution is the input-gradient map of conv2d, so the two share
the same scatter kernel.
"""
import dataclasses
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.autograd import apply_op
from rainbowssd.exceptions import ConfigError, DimensionError
from rainbowssd.tensor import Tensor, Tensor4, as_tensor4, default_dtype

LOGGER = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclasses.dataclass
class ConvParams:
    """
    Convolution parameters. For conv2d `weight` is (out_c, in_c, kh, kw); for
    deconv2d it is read as (in_c, out_c, kh, kw), so one weight tensor drives a
    convolution and its adjoint. `bias` always has one entry per output channel.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclasses.dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics"""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, *, name: str = "bn", **kwargs) -> "BatchNormParams":
        """Identity-initialized parameters for `channels` channels"""
        dtype = default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> None:
        """Check vector lengths and ranges"""
        for field in ("beta", "running_mean", "running_var"):
            value = getattr(self, field)
            arr = np.asarray(value.data if isinstance(value, Tensor) else value)
            length = arr.shape[0] if arr.ndim else 0
            if arr.ndim != 1 or length != self.channels:
                raise DimensionError(
                    f"batch norm {field} has length {length}, expected {self.channels}"
                )
        if np.any(self.running_var < 0):
            raise ConfigError("batch norm running_var must be non-negative")
        if self.eps < 0:
            raise ConfigError("batch norm eps must be non-negative")
        if not 0 < self.momentum <= 1:
            raise ConfigError("batch norm momentum must be in (0, 1]")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """floor((size + 2 pad - kernel) / stride) + 1"""
    return (size + 2 * pad - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """(size - 1) stride - 2 pad + kernel"""
    return (size - 1) * stride - 2 * pad + kernel


def pool_output_size(size: int, kernel: int, stride: int, ceil_mode: bool) -> int:
    """
    Pooling output extent. In ceil mode a final partial window is kept as long
    as it starts inside the input.
    """
    if ceil_mode:
        out = -(-(size - kernel) // stride) + 1
        if (out - 1) * stride >= size:
            out -= 1
        return out
    return (size - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """(n, c, oh, ow, kh, kw) read-only view of the strided windows of `xp`"""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """y[n,o,i,j] = sum_{c,u,v} w[o,c,u,v] x_pad[n,c,i s+u,j s+v]"""
    kh, kw = w.shape[2:]
    oh = conv_output_size(x.shape[2], kh, stride, pad)
    ow = conv_output_size(x.shape[3], kw, stride, pad)
    cols = _windows(_pad(x, pad), kh, kw, stride, oh, ow)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _scatter(
    gy: np.ndarray, w: np.ndarray, out_hw: Tuple[int, int], stride: int, pad: int
) -> np.ndarray:
    """
    Adjoint of `_correlate`: spreads gy (n, o, oh, ow) back onto an (n, c, H, W)
    grid through w (o, c, kh, kw).
    """
    n, _, oh, ow = gy.shape
    kh, kw = w.shape[2:]
    hp, wp = out_hw[0] + 2 * pad, out_hw[1] + 2 * pad
    gcols = np.tensordot(gy, w, axes=([1], [0]))
    gxp = np.zeros((n, w.shape[1], hp, wp), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    return gxp[:, :, pad : hp - pad, pad : wp - pad]


def _check_conv(x: Tensor4, p: ConvParams, in_axis: int, what: str) -> None:
    if p.weight.data.ndim != 4:
        raise DimensionError(f"{what} weight must be rank 4, got {p.weight.shape}")
    if x.c != p.weight.shape[in_axis]:
        raise DimensionError(
            f"{what} input axis c has {x.c} channels, weight expects "
            f"{p.weight.shape[in_axis]}"
        )
    out_c = p.weight.shape[1 - in_axis]
    if p.bias.shape != (out_c,):
        raise DimensionError(
            f"{what} bias axis o has length {p.bias.shape}, expected ({out_c},)"
        )
    if p.stride < 1 or p.pad < 0:
        raise ConfigError(f"{what} stride must be >= 1 and pad >= 0")


def conv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """2-D cross-correlation with bias, stride and symmetric zero padding"""
    x = as_tensor4(x)
    _check_conv(x, p, 1, "conv2d")
    kh, kw = p.kernel
    oh = conv_output_size(x.h, kh, p.stride, p.pad)
    ow = conv_output_size(x.w, kw, p.stride, p.pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d output axis h/w would be {oh}x{ow} for input {x.h}x{x.w} "
            f"kernel {kh}x{kw} stride {p.stride} pad {p.pad}"
        )
    weight, bias, stride, pad = p.weight, p.bias, p.stride, p.pad

    def forward() -> np.ndarray:
        y = _correlate(x.data, weight.data, stride, pad)
        y += bias.data[None, :, None, None]
        return y

    cols = _windows(_pad(x.data, pad), kh, kw, stride, oh, ow)

    def backward_fn(gy, needs):
        gx = _scatter(gy, weight.data, (x.h, x.w), stride, pad) if needs[0] else None
        gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 2, 3])) if needs[1] else None
        gb = gy.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    return apply_op(
        "conv2d", (x, weight, bias), forward(), forward, backward_fn, rank4=True
    )  # type: ignore[return-value]


def deconv2d(x: Tensor4, p: ConvParams) -> Tensor4:
    """
    Transposed convolution. Output extent is (in - 1) stride - 2 pad + k; the
    map applied is the input-gradient of conv2d with the same weight tensor.
    """
    x = as_tensor4(x)
    _check_conv(x, p, 0, "deconv2d")
    kh, kw = p.kernel
    oh = deconv_output_size(x.h, kh, p.stride, p.pad)
    ow = deconv_output_size(x.w, kw, p.stride, p.pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"deconv2d output axis h/w would be {oh}x{ow} for input {x.h}x{x.w}"
        )
    weight, bias, stride, pad = p.weight, p.bias, p.stride, p.pad

    def forward() -> np.ndarray:
        y = _scatter(x.data, weight.data, (oh, ow), stride, pad)
        y = y + bias.data[None, :, None, None]
        return np.ascontiguousarray(y)

    def backward_fn(gy, needs):
        gx = _correlate(gy, weight.data, stride, pad) if needs[0] else None
        gw = None
        if needs[1]:
            cols = _windows(_pad(gy, pad), kh, kw, stride, x.h, x.w)
            gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = gy.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    return apply_op(
        "deconv2d", (x, weight, bias), forward(), forward, backward_fn, rank4=True
    )  # type: ignore[return-value]


def max_pool2d(x: Tensor4, kernel: int, stride: int, ceil_mode: bool = False) -> Tensor4:
    """
    Max pooling without padding. Window argmax positions are kept for the
    backward pass, which routes each output gradient to exactly one input.
    """
    x = as_tensor4(x)
    if kernel < 1 or stride < 1:
        raise ConfigError("max_pool2d kernel and stride must be >= 1")
    if kernel > x.h or kernel > x.w:
        raise DimensionError(
            f"max_pool2d kernel {kernel} exceeds input axis h/w {x.h}x{x.w}"
        )
    oh = pool_output_size(x.h, kernel, stride, ceil_mode)
    ow = pool_output_size(x.w, kernel, stride, ceil_mode)
    if oh < 1 or ow < 1:
        raise DimensionError(f"max_pool2d output axis h/w would be {oh}x{ow}")
    hp = (oh - 1) * stride + kernel
    wp = (ow - 1) * stride + kernel

    def pooled() -> Tuple[np.ndarray, np.ndarray]:
        xp = np.full((x.n, x.c, hp, wp), -np.inf, dtype=x.data.dtype)
        xp[:, :, : x.h, : x.w] = x.data[:, :, :hp, :wp]
        win = _windows(xp, kernel, kernel, stride, oh, ow)
        flat = win.reshape(x.n, x.c, oh, ow, kernel * kernel)
        arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg

    def forward() -> np.ndarray:
        return pooled()[0]

    y, argmax = pooled()

    def backward_fn(gy, needs):
        del needs
        gxp = np.zeros((x.n, x.c, max(hp, x.h), max(wp, x.w)), dtype=gy.dtype)
        ni, ci, ii, jj = np.indices(argmax.shape, sparse=True)
        rows = ii * stride + argmax // kernel
        cols = jj * stride + argmax % kernel
        np.add.at(gxp, (ni, ci, rows, cols), gy)
        return (gxp[:, :, : x.h, : x.w],)

    return apply_op("max_pool2d", (x,), y, forward, backward_fn, rank4=True)  # type: ignore[return-value]


def batch_norm(x: Tensor4, p: BatchNormParams, training: bool) -> Tensor4:
    """
    Per-channel normalization. Training mode uses batch statistics over
    (n, h, w) and updates the running statistics; inference mode uses the
    running statistics.
    """
    x = as_tensor4(x)
    p.validate()
    if x.c != p.channels:
        raise DimensionError(
            f"batch_norm input axis c has {x.c} channels, params have {p.channels}"
        )
    count = x.n * x.h * x.w
    if count == 0:
        raise DimensionError("batch_norm needs a non-empty n*h*w extent")
    gamma, beta, eps = p.gamma, p.beta, p.eps
    shape = (1, -1, 1, 1)

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mean = p.running_mean.copy()
        var = p.running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)

    def forward() -> np.ndarray:
        xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
        return xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)

    def backward_fn(gy, needs):
        gx = None
        if needs[0]:
            gxhat = gy * gamma.data.reshape(shape)
            if training:
                gx = (
                    inv_std.reshape(shape)
                    / count
                    * (
                        count * gxhat
                        - gxhat.sum(axis=(0, 2, 3)).reshape(shape)
                        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                    )
                )
            else:
                gx = gxhat * inv_std.reshape(shape)
        ggamma = (gy * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = gy.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, ggamma, gbeta

    return apply_op(
        "batch_norm", (x, gamma, beta), forward(), forward, backward_fn, rank4=True
    )  # type: ignore[return-value]


def concat(xs: Sequence[Tensor], axis: int, *, op: str = "concat") -> Tensor:
    """Concatenate along `axis`; the backward pass slices the gradient apart"""
    if not xs:
        raise DimensionError(f"{op} needs at least one input")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def forward() -> np.ndarray:
        return np.concatenate([x.data for x in xs], axis=axis)

    def backward_fn(gy, needs):
        parts = np.split(gy, bounds, axis=axis)
        return [part if need else None for part, need in zip(parts, needs)]

    rank4 = all(isinstance(x, Tensor4) for x in xs)
    return apply_op(op, tuple(xs), forward(), forward, backward_fn, rank4=rank4)


def concat_channels(xs: Sequence[Tensor4]) -> Tensor4:
    """
    Concatenate along the channel axis. Channel blocks appear in input order and
    slicing block i out of the result recovers input i exactly.
    """
    xs = [as_tensor4(x) for x in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    ref = xs[0]
    for level, x in enumerate(xs[1:], start=1):
        for axis, a, b in (("n", ref.n, x.n), ("h", ref.h, x.h), ("w", ref.w, x.w)):
            if a != b:
                raise DimensionError(
                    f"concat_channels level {level} axis {axis} is {b}, expected {a}"
                )
    return concat(xs, 1, op="concat_channels")  # type: ignore[return-value]


def channel_blocks(x: Tensor4, channels: Sequence[int]) -> List[np.ndarray]:
    """Slice the channel axis into consecutive blocks of the given sizes"""
    if sum(channels) != x.c:
        raise DimensionError(
            f"channel blocks sum to {sum(channels)}, tensor has {x.c} channels"
        )
    bounds = np.cumsum(channels)[:-1]
    return np.split(x.data, bounds, axis=1)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit"""

    def forward() -> np.ndarray:
        return np.maximum(x.data, 0)

    mask = x.data > 0

    def backward_fn(gy, needs):
        del needs
        return (gy * mask,)

    return apply_op(
        "relu", (x,), forward(), forward, backward_fn, rank4=isinstance(x, Tensor4)
    )


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Row-major reshape"""
    in_shape = x.shape

    def forward() -> np.ndarray:
        return x.data.reshape(shape)

    def backward_fn(gy, needs):
        del needs
        return (gy.reshape(in_shape),)

    return apply_op("reshape", (x,), forward(), forward, backward_fn)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    """Axis permutation"""
    inverse = tuple(np.argsort(axes))

    def forward() -> np.ndarray:
        return np.ascontiguousarray(x.data.transpose(axes))

    def backward_fn(gy, needs):
        del needs
        return (gy.transpose(inverse),)

    return apply_op("transpose", (x,), forward(), forward, backward_fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]; the gradient is zero outside the slice"""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(
            f"slice [{start}:{stop}] out of range for last axis of size {x.shape[-1]}"
        )

    def forward() -> np.ndarray:
        return np.ascontiguousarray(x.data[..., start:stop])

    def backward_fn(gy, needs):
        del needs
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = gy
        return (gx,)

    return apply_op("slice_last", (x,), forward(), forward, backward_fn)


def bilinear_kernel(kernel: int) -> np.ndarray:
    """2-D bilinear interpolation weights for a kernel x kernel upsampler"""
    factor = (kernel + 1) // 2
    center = factor - 1 if kernel % 2 == 1 else factor - 0.5
    og = np.arange(kernel, dtype=np.float64)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


def he_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, *, name: str = ""
) -> Tensor:
    """He-normal initialized parameter tensor"""
    std = math.sqrt(2.0 / max(1, fan_in))
    return Tensor(rng.normal(0.0, std, size=shape).astype(default_dtype()), name=name)


def init_conv(
    rng: np.random.Generator,
    in_c: int,
    out_c: int,
    kernel: int,
    *,
    stride: int = 1,
    pad: int = 0,
    name: str = "conv",
    bias: Optional[np.ndarray] = None,
    std: Optional[float] = None,
) -> ConvParams:
    """
    Seeded conv2d parameters with zero bias. Weights are He-normal unless a
    fixed `std` is given.
    """
    shape = (out_c, in_c, kernel, kernel)
    if std is None:
        weight = he_normal(rng, shape, in_c * kernel * kernel, name=f"{name}.weight")
    else:
        data = rng.normal(0.0, std, size=shape).astype(default_dtype())
        weight = Tensor(data, name=f"{name}.weight")
    if bias is None:
        bias = np.zeros(out_c, dtype=default_dtype())
    return ConvParams(
        weight=weight,
        bias=Tensor(bias, name=f"{name}.bias"),
        stride=stride,
        pad=pad,
    )


def init_deconv(
    channels: int, kernel: int, *, stride: int, pad: int, name: str = "deconv"
) -> ConvParams:
    """
    Channel-preserving transposed convolution initialized to per-channel
    bilinear interpolation.
    """
    weight = np.zeros((channels, channels, kernel, kernel), dtype=default_dtype())
    idx = np.arange(channels)
    weight[idx, idx] = bilinear_kernel(kernel)
    return ConvParams(
        weight=Tensor(weight, name=f"{name}.weight"),
        bias=Tensor(np.zeros(channels, dtype=default_dtype()), name=f"{name}.bias"),
        stride=stride,
        pad=pad,
    )
