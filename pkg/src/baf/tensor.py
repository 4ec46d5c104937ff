"""Dense feature tensors and the frozen layer primitives of a split layer.

A feature tensor is a numpy array of shape ``(C, H, W)``; batched variants
``(N, C, H, W)`` are accepted by every operation that makes sense per
sample. Working precision is float32, float64 is used for gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InputError, InvertibilityError, ShapeError

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.1

FTEN_MAGIC = b"FTEN"
FTEN_VERSION = 1


def dtype_for(precision: int):
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise ShapeError(f"precision must be 32 or 64, got {precision}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise InputError(f"{what} contains non-finite values")
    return x


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a (C, H, W) feature tensor."""
    arr = np.asarray(x, dtype=dtype or None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    if arr.ndim != 3:
        raise ShapeError(f"feature tensor must be (C, H, W), got shape {arr.shape}")
    return check_finite(arr)


@dataclass(frozen=True)
class ConvLayer:
    """Square-kernel convolution with same-padding and stride 1 or 2.

    ``weight`` has shape (out_channels, in_channels, L, L).
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (P, Q, L, L), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {w.shape[2]}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise ShapeError(f"bias must have {w.shape[0]} entries")
        object.__setattr__(self, "weight", w)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    def astype(self, dtype) -> "ConvLayer":
        bias = None if self.bias is None else np.asarray(self.bias, dtype=dtype)
        return ConvLayer(self.weight.astype(dtype), bias, self.stride)


@dataclass(frozen=True)
class BnAffine:
    """Inference-time batch norm folded into ``z = scale * x + bias`` per channel."""

    scale: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        scale = np.asarray(self.scale)
        bias = np.zeros_like(scale) if self.bias is None else np.asarray(self.bias)
        if scale.ndim != 1 or bias.shape != scale.shape:
            raise ShapeError("BN scale and bias must be 1-D of equal length")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "bias", bias)

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def subset(self, order: Sequence[int]) -> "BnAffine":
        idx = np.asarray(order, dtype=np.intp)
        return BnAffine(self.scale[idx], self.bias[idx])

    def astype(self, dtype) -> "BnAffine":
        return BnAffine(self.scale.astype(dtype), self.bias.astype(dtype))


def _channel_view(v: np.ndarray) -> np.ndarray:
    # broadcasts against (C,H,W) and (N,C,H,W)
    return v.reshape((-1, 1, 1))


def _im2col(x: np.ndarray, k: int, stride: int):
    # x is channels-last (N, H, W, Q); columns are ordered (ki, kj, q)
    n, h, w, q = x.shape
    pad = (k - 1) // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, q), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x
    cols = np.empty((n, ho, wo, k, k, q), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj] = xp[:, ki:ki + stride * (ho - 1) + 1:stride,
                                       kj:kj + stride * (wo - 1) + 1:stride]
    return cols.reshape(n * ho * wo, k * k * q), (ho, wo)


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv_forward(x: np.ndarray, weight: np.ndarray, bias, stride: int):
    """Channels-last batched convolution.

    ``x`` is (N, H, W, Q); returns the (N, Ho, Wo, P) output and the
    column matrix that :func:`conv_backward` needs.
    """
    n = x.shape[0]
    p, _, k, _ = weight.shape
    cols, (ho, wo) = _im2col(x, k, stride)
    out = cols @ _weight_matrix(weight).T
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, p), cols


def conv_backward(grad_out: np.ndarray, cols: np.ndarray, x_shape, weight: np.ndarray,
                  stride: int, need_input_grad: bool = True):
    """Gradients of :func:`conv_forward` for input, weight and bias (channels-last)."""
    n, h, w, q = x_shape
    p, _, k, _ = weight.shape
    pad = (k - 1) // 2
    ho, wo = grad_out.shape[1:3]
    gmat = grad_out.reshape(-1, p)
    dweight = (gmat.T @ cols).reshape(p, k, k, q).transpose(0, 3, 1, 2)
    dbias = gmat.sum(axis=0)
    if not need_input_grad:
        return None, dweight, dbias
    dcols = (gmat @ _weight_matrix(weight)).reshape(n, ho, wo, k, k, q)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, q), dtype=grad_out.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += dcols[:, :, :, ki, kj]
    return dxp[:, pad:pad + h, pad:pad + w], dweight, dbias


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Zero-padded cross-correlation of ``x`` with ``layer`` (no kernel flip).

    Accepts (C, H, W) or (N, C, H, W). Output spatial size is
    ``ceil(H / stride) x ceil(W / stride)``.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D or 4-D input, got {x.shape}")
    if xb.shape[1] != layer.in_channels:
        raise ShapeError(f"conv2d: input has {xb.shape[1]} channels, layer expects {layer.in_channels}")
    out = to_nchw(conv_forward(to_nhwc(xb), layer.weight, layer.bias, layer.stride)[0])
    check_finite(out, "conv2d output")
    return out[0] if single else out


def _check_bn(x: np.ndarray, bn: BnAffine):
    if x.ndim not in (3, 4) or x.shape[-3] != bn.channels:
        raise ShapeError(f"BN has {bn.channels} channels, tensor shape is {x.shape}")


def bn_forward(x: np.ndarray, bn: BnAffine) -> np.ndarray:
    x = np.asarray(x)
    _check_bn(x, bn)
    out = x * _channel_view(bn.scale).astype(x.dtype) + _channel_view(bn.bias).astype(x.dtype)
    return check_finite(out, "bn output")


def bn_inverse(z: np.ndarray, bn: BnAffine) -> np.ndarray:
    z = np.asarray(z)
    _check_bn(z, bn)
    if np.any(bn.scale == 0):
        raise InvertibilityError("BN scale has zero entries; affine is not invertible")
    out = (z - _channel_view(bn.bias).astype(z.dtype)) / _channel_view(bn.scale).astype(z.dtype)
    return check_finite(out, "inverse bn output")


@dataclass(frozen=True)
class Activation:
    """Elementwise activation: ``leaky_relu`` with a slope, or ``identity``."""

    kind: str = "leaky_relu"
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in ("leaky_relu", "identity"):
            raise ShapeError(f"unknown activation {self.kind!r}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return x
        return np.where(x >= 0, x, x * x.dtype.type(self.slope))

    def grad(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return grad_out
        return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(self.slope))


def activation(x: np.ndarray, kind: str = "leaky_relu", slope: float = LEAKY_SLOPE) -> np.ndarray:
    return Activation(kind, slope)(np.asarray(x))


def downsample_phases(x: np.ndarray) -> list:
    """Split a tensor into its four stride-2 phases.

    Phase ``s`` keeps rows ``s // 2`` and columns ``s % 2`` modulo 2.
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"phase split needs even height and width, got {h}x{w}")
    return [x[..., s // 2::2, s % 2::2] for s in range(4)]


def interleave_phases(phases: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`downsample_phases`."""
    if len(phases) != 4:
        raise ShapeError("need exactly four phases")
    first = np.asarray(phases[0])
    h, w = first.shape[-2:]
    out = np.empty(first.shape[:-2] + (2 * h, 2 * w), dtype=first.dtype)
    for s, ph in enumerate(phases):
        if np.shape(ph) != first.shape:
            raise ShapeError("phases must share a shape")
        out[..., s // 2::2, s % 2::2] = ph
    return out


def write_ften(x: np.ndarray) -> bytes:
    x = as_tensor(x)
    c, h, w = x.shape
    return FTEN_MAGIC + struct.pack("<BIII", FTEN_VERSION, c, h, w) + x.astype("<f4").tobytes()


def read_ften(data: bytes) -> np.ndarray:
    if len(data) < 17 or data[:4] != FTEN_MAGIC:
        raise FormatError("not an FTEN tensor file")
    version, c, h, w = struct.unpack_from("<BIII", data, 4)
    if version != FTEN_VERSION:
        raise FormatError(f"unsupported FTEN version {version}")
    body = data[17:]
    if len(body) != 4 * c * h * w:
        raise FormatError(f"FTEN body has {len(body)} bytes, expected {4 * c * h * w}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(c, h, w)
