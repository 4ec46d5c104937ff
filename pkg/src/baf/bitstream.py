"""BAFC bitstream: header, binary16 side information, and payload.

Layout (little-endian)::

    magic      4s   b"BAFC"
    version    u8
    codec      u8   0 raw, 1 med_range, 2 external
    n_bits     u8
    C          u16
    channel_h  u16
    channel_w  u16
    order      C x u16
    payload    u32  payload length in bytes
    crc32      u32  over every other byte of the stream
    side info  C x (u16 m, u16 M)   raw binary16 bit patterns
    payload    bytes

``raw`` packs the tiled image MSB-first at n bits per sample, zero-padded
to a byte. ``med_range`` is the built-in lossless coder. ``external``
carries no payload: the tile travels as a graymap through an outside codec
and is handed back to :func:`decode` as ``companion``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rangecoder
from .errors import ConfigError, CorruptionError, FormatError
from .quant import QuantizedPack, grid_shape, side_info_bits, tile, untile

MAGIC = b"BAFC"
VERSION = 1
CODECS = {"raw": 0, "med_range": 1, "external": 2}
CODEC_NAMES = {v: k for k, v in CODECS.items()}

_FIXED = struct.Struct("<4sBBBHHH")
_TAIL = struct.Struct("<II")


def header_size(C: int) -> int:
    return _FIXED.size + 2 * C + _TAIL.size


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    codec: str
    header_bits: int
    side_info_bits: int
    payload_bits: int
    padding_bits: int = 0

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    def report(self) -> dict:
        return {
            "header_bits": self.header_bits,
            "side_info_bits": self.side_info_bits,
            "payload_bits": self.payload_bits,
            "padding_bits": self.padding_bits,
            "total_bits": self.total_bits,
        }


def pack_raw(pixels: np.ndarray, n: int) -> bytes:
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint8)
    bits = (pixels.reshape(-1, 1) >> shifts) & 1
    return np.packbits(bits.astype(np.uint8).ravel()).tobytes()


def unpack_raw(payload: bytes, count: int, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits.size != -(-count * n // 8) * 8:
        raise CorruptionError("raw payload length does not match the header")
    if bits[count * n:].any():
        raise CorruptionError("non-zero padding in raw payload")
    weights = (1 << np.arange(n - 1, -1, -1)).astype(np.uint16)
    return (bits[:count * n].reshape(count, n) @ weights).astype(np.uint8)


def encode(pack: QuantizedPack, codec: str = "med_range") -> Bitstream:
    if codec not in CODECS:
        raise ConfigError(f"unknown codec {codec!r}; choose from {sorted(CODECS)}")
    img = tile(pack)
    n = pack.n_bits
    padding = 0
    if codec == "raw":
        payload = pack_raw(img.pixels, n)
        payload_bits = n * img.pixels.size
        padding = 8 * len(payload) - payload_bits
    elif codec == "med_range":
        payload = rangecoder.encode_med(img.pixels, n).tobytes()
        payload_bits = 8 * len(payload)
    else:
        payload = b""
        payload_bits = 0
    head = _FIXED.pack(MAGIC, VERSION, CODECS[codec], n, pack.C, pack.channel_h, pack.channel_w)
    head += struct.pack(f"<{pack.C}H", *pack.order)
    side = np.stack([pack.m, pack.M], axis=1).view(np.uint16).astype("<u2").tobytes()
    length = struct.pack("<I", len(payload))
    crc = zlib.crc32(head + length + side + payload)
    data = head + length + struct.pack("<I", crc) + side + payload
    return Bitstream(data, codec, 8 * header_size(pack.C), side_info_bits(pack), payload_bits, padding)


def parse_header(data: bytes):
    """Validate framing and return ``(fields, side_info, payload)``."""
    if len(data) < _FIXED.size:
        raise CorruptionError("stream shorter than the fixed header")
    magic, version, codec_id, n, C, h, w = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("not a BAFC stream")
    if version != VERSION:
        raise FormatError(f"unsupported BAFC version {version}")
    off = _FIXED.size
    if len(data) < header_size(C) + 4 * C:
        raise CorruptionError("stream truncated inside header or side info")
    order = struct.unpack_from(f"<{C}H", data, off)
    off += 2 * C
    payload_len, crc = _TAIL.unpack_from(data, off)
    side_off = off + _TAIL.size
    pay_off = side_off + 4 * C
    if len(data) != pay_off + payload_len:
        raise CorruptionError(f"stream has {len(data) - pay_off} payload bytes, header declares {payload_len}")
    if zlib.crc32(data[:off + 4] + data[side_off:]) != crc:
        raise CorruptionError("checksum mismatch")
    if codec_id not in CODEC_NAMES:
        raise FormatError(f"unknown codec id {codec_id}")
    fields = {"codec": CODEC_NAMES[codec_id], "n_bits": n, "C": C,
              "channel_h": h, "channel_w": w, "order": tuple(order)}
    side = np.frombuffer(data[side_off:pay_off], dtype="<u2").astype(np.uint16).reshape(C, 2)
    return fields, side.view(np.float16), data[pay_off:]


def decode(data, companion: Optional[bytes] = None) -> QuantizedPack:
    """Rebuild the quantized pack; raises on any malformed or damaged input."""
    if isinstance(data, Bitstream):
        data = data.data
    fields, side, payload = parse_header(bytes(data))
    n, C = fields["n_bits"], fields["C"]
    h, w = fields["channel_h"], fields["channel_w"]
    codec = fields["codec"]
    try:
        rows, cols = grid_shape(C)
    except ConfigError as exc:
        raise CorruptionError(str(exc)) from exc
    shape = (rows * h, cols * w)
    if codec == "raw":
        pixels = unpack_raw(payload, shape[0] * shape[1], n).reshape(shape)
    elif codec == "med_range":
        pixels, status = rangecoder.decode_med(np.frombuffer(payload, dtype=np.uint8), shape[0], shape[1], n)
        if status != rangecoder.OK:
            raise CorruptionError(f"range decoder failed (status {status})")
    else:
        if companion is None:
            raise ConfigError("external codec stream needs the companion graymap")
        pixels = read_pgm(companion, (1 << n) - 1)
        if pixels.shape != shape:
            raise CorruptionError(f"graymap is {pixels.shape}, expected {shape}")
    codes = untile(pixels, h, w, C)
    if codes.max(initial=0) >= (1 << n):
        raise CorruptionError("decoded code exceeds n bits")
    return QuantizedPack(n, codes, side[:, 0].copy(), side[:, 1].copy(), fields["order"])


def write_pgm(pixels: np.ndarray, maxval: int) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def read_pgm(data: bytes, expected_maxval: Optional[int] = None) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated graymap header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError("only binary graymaps (P5) are supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("bad graymap header") from exc
    if maxval > 255:
        raise FormatError("16-bit graymaps are not supported")
    if expected_maxval is not None and maxval != expected_maxval:
        raise FormatError(f"graymap maxval {maxval} does not match {expected_maxval}")
    body = data[pos:]
    if len(body) != w * h:
        raise CorruptionError(f"graymap body has {len(body)} bytes, expected {w * h}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if pixels.max(initial=0) > maxval:
        raise CorruptionError("graymap sample exceeds maxval")
    return pixels.copy()


def export_tile_pgm(pack: QuantizedPack) -> bytes:
    """Tiled codes as a binary graymap with maxval ``2**n - 1``."""
    return write_pgm(tile(pack).pixels, (1 << pack.n_bits) - 1)


def pgm_sidecar(pack: QuantizedPack) -> str:
    """Key-value text carrying everything the graymap does not."""
    m = ",".join(f"{v:04x}" for v in pack.m.view(np.uint16).tolist())
    M = ",".join(f"{v:04x}" for v in pack.M.view(np.uint16).tolist())
    return (f"version = {VERSION}\nn_bits = {pack.n_bits}\nC = {pack.C}\n"
            f"channel_h = {pack.channel_h}\nchannel_w = {pack.channel_w}\n"
            f"order = {','.join(map(str, pack.order))}\nm = {m}\nM = {M}\n")


def import_tile_pgm(data: bytes, header: str) -> QuantizedPack:
    fields = {}
    for line in header.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            fields[key.strip()] = value.strip()
    try:
        n = int(fields["n_bits"])
        C, h, w = int(fields["C"]), int(fields["channel_h"]), int(fields["channel_w"])
        order = tuple(int(v) for v in fields["order"].split(","))
        m = np.array([int(v, 16) for v in fields["m"].split(",")], dtype=np.uint16).view(np.float16)
        M = np.array([int(v, 16) for v in fields["M"].split(",")], dtype=np.uint16).view(np.float16)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad graymap sidecar: {exc}") from exc
    pixels = read_pgm(data, (1 << n) - 1)
    return QuantizedPack(n, untile(pixels, h, w, C), m, M, order)
