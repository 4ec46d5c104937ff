"""Per-channel n-bit uniform quantization and power-of-two tiling.

Each channel is mapped onto ``[0, 2**n - 1]`` using its own range
``[m, M]``. The range is carried as two binary16 values (32 bits of side
information per channel), rounded outward so every sample stays inside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError, CorruptionError, InputError, RangeError, ShapeError
from .select import is_power_of_two

MIN_BITS, MAX_BITS = 2, 8
SIDE_INFO_BITS_PER_CHANNEL = 32


def _check_bits(n: int):
    if not MIN_BITS <= n <= MAX_BITS:
        raise ConfigError(f"n_bits must be in [{MIN_BITS}, {MAX_BITS}], got {n}")


def _f16_directed(v: float, toward: float) -> np.float16:
    with np.errstate(over="ignore"):
        f = np.float16(v)
    if np.isfinite(f) and (float(f) - v) * toward < 0:
        f = np.nextafter(f, np.float16(toward))
    if not np.isfinite(f):
        raise RangeError(f"{v!r} is outside the binary16 finite range")
    return f


def round_f16_directed(m: float, M: float) -> Tuple[np.float16, np.float16]:
    """Round ``m`` down and ``M`` up to binary16 so ``[m, M]`` is contained."""
    m, M = float(m), float(M)
    if not (np.isfinite(m) and np.isfinite(M)):
        raise InputError("range endpoints must be finite")
    if m > M:
        raise InputError(f"min {m} exceeds max {M}")
    return _f16_directed(m, -np.inf), _f16_directed(M, np.inf)


def quantize_channel(z, n: int):
    """Quantize one channel; returns ``(codes, m, M)`` with binary16 range.

    Rounding is half away from zero. A channel whose range collapses to a
    single binary16 value codes to all zeros.
    """
    _check_bits(n)
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise InputError("channel must be non-empty and finite")
    m, M = round_f16_directed(z.min(), z.max())
    levels = (1 << n) - 1
    lo, hi = float(m), float(M)
    if hi == lo:
        return np.zeros(z.shape, dtype=np.uint8), m, M
    t = (z - lo) / (hi - lo) * levels
    codes = np.clip(np.floor(t + 0.5), 0, levels).astype(np.uint8)
    return codes, m, M


def dequantize_channel(codes, m, M, n: int, dtype=np.float32) -> np.ndarray:
    _check_bits(n)
    codes = np.asarray(codes)
    levels = (1 << n) - 1
    if codes.size and (codes.min() < 0 or codes.max() > levels):
        raise CorruptionError(f"code out of range for {n}-bit quantizer")
    lo, hi = float(m), float(M)
    if hi == lo:
        return np.full(codes.shape, lo, dtype=dtype)
    return (codes.astype(np.float64) / levels * (hi - lo) + lo).astype(dtype)


def bin_interval(code, m, M, n: int):
    """Closed interval of real values that quantize to ``code``."""
    lo, hi = float(m), float(M)
    step = (hi - lo) / ((1 << n) - 1)
    center = lo + np.asarray(code, dtype=np.float64) * step
    return center - 0.5 * step, center + 0.5 * step


@dataclass
class QuantizedPack:
    """Quantized selected channels plus their binary16 ranges and order."""

    n_bits: int
    codes: np.ndarray          # (C, h, w) uint8
    m: np.ndarray              # (C,) float16
    M: np.ndarray              # (C,) float16
    order: Tuple[int, ...]

    def __post_init__(self):
        _check_bits(self.n_bits)
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        self.m = np.asarray(self.m, dtype=np.float16)
        self.M = np.asarray(self.M, dtype=np.float16)
        self.order = tuple(int(i) for i in self.order)
        if self.codes.ndim != 3:
            raise ShapeError("codes must be (C, h, w)")
        C = self.codes.shape[0]
        if self.m.shape != (C,) or self.M.shape != (C,) or len(self.order) != C:
            raise ShapeError("side info and order must have one entry per channel")
        if self.codes.size and self.codes.max() >= (1 << self.n_bits):
            raise CorruptionError(f"code exceeds {self.n_bits} bits")

    @property
    def C(self) -> int:
        return self.codes.shape[0]

    @property
    def channel_h(self) -> int:
        return self.codes.shape[1]

    @property
    def channel_w(self) -> int:
        return self.codes.shape[2]

    def __eq__(self, other):
        if not isinstance(other, QuantizedPack):
            return NotImplemented
        return (self.n_bits == other.n_bits and self.order == other.order
                and np.array_equal(self.codes, other.codes)
                and self.m.view(np.uint16).tolist() == other.m.view(np.uint16).tolist()
                and self.M.view(np.uint16).tolist() == other.M.view(np.uint16).tolist())


def quantize_tensor(zc: np.ndarray, n: int, order: Sequence[int]) -> QuantizedPack:
    """Quantize each channel of ``zc`` (already restricted to the selection)."""
    zc = np.asarray(zc)
    if zc.ndim != 3 or zc.shape[0] != len(order):
        raise ShapeError(f"expected {len(order)} selected channels, got shape {zc.shape}")
    parts = [quantize_channel(ch, n) for ch in zc]
    codes = np.stack([p[0] for p in parts])
    m = np.array([p[1] for p in parts], dtype=np.float16)
    M = np.array([p[2] for p in parts], dtype=np.float16)
    return QuantizedPack(n, codes, m, M, tuple(order))


def dequantize_pack(pack: QuantizedPack, dtype=np.float32) -> np.ndarray:
    return np.stack([dequantize_channel(pack.codes[i], pack.m[i], pack.M[i], pack.n_bits, dtype)
                     for i in range(pack.C)])


def side_info_bits(pack: QuantizedPack) -> int:
    return SIDE_INFO_BITS_PER_CHANNEL * pack.C


def grid_shape(C: int) -> Tuple[int, int]:
    """``(grid_rows, grid_cols)`` for ``C`` channels: 2**floor(k/2) by 2**ceil(k/2)."""
    if not is_power_of_two(C):
        raise ConfigError(f"tiling needs a power-of-two channel count, got {C}")
    k = C.bit_length() - 1
    return 1 << (k // 2), 1 << ((k + 1) // 2)


@dataclass
class TiledImage:
    pixels: np.ndarray
    grid_rows: int
    grid_cols: int
    n_bits: int


def tile(pack: QuantizedPack) -> TiledImage:
    """Lay channels out row-major on the grid, in selection order."""
    rows, cols = grid_shape(pack.C)
    h, w = pack.channel_h, pack.channel_w
    pixels = (pack.codes.reshape(rows, cols, h, w)
              .transpose(0, 2, 1, 3)
              .reshape(rows * h, cols * w))
    return TiledImage(np.ascontiguousarray(pixels), rows, cols, pack.n_bits)


def untile(img, channel_h: int, channel_w: int, C: int) -> np.ndarray:
    """Recover the (C, h, w) code array from a tiled image."""
    pixels = img.pixels if isinstance(img, TiledImage) else np.asarray(img)
    rows, cols = grid_shape(C)
    if pixels.shape != (rows * channel_h, cols * channel_w):
        raise CorruptionError(
            f"tiled image is {pixels.shape}, expected {(rows * channel_h, cols * channel_w)}")
    return np.ascontiguousarray(
        pixels.reshape(rows, channel_h, cols, channel_w)
        .transpose(0, 2, 1, 3)
        .reshape(C, channel_h, channel_w))
