"""MED-predicted residual coding with an adaptive binary range coder.

Residuals ``(x - med) mod 2**n`` are coded MSB first through a binary tree
of adaptive bit models (one model per bit position and prefix), with a
carry-less 32-bit range coder. A fixed 32-bit end marker follows the last
residual so a damaged payload is detected on decode.
"""

import numpy as np
from numba import njit

PROB_BITS = 12
PROB_ONE = 1 << PROB_BITS
ADAPT_SHIFT = 5
TOP = 1 << 24
BOT = 1 << 16
MASK32 = 0xFFFFFFFF
END_MARKER = 0xBAFC0DE5

OK = 0
ERR_OVERRUN = 1
ERR_MARKER = 2
ERR_TRAILING = 3


@njit(cache=True)
def med_predict(left, up, up_left):
    """Median edge detector prediction from three causal neighbours."""
    hi = max(left, up)
    lo = min(left, up)
    if up_left >= hi:
        return lo
    if up_left <= lo:
        return hi
    return left + up - up_left


@njit(cache=True)
def _prediction(img, i, j):
    left = img[i, j - 1] if j > 0 else 0
    up = img[i - 1, j] if i > 0 else 0
    up_left = img[i - 1, j - 1] if i > 0 and j > 0 else 0
    return med_predict(np.int64(left), np.int64(up), np.int64(up_left))


@njit(cache=True)
def _enc_normalize(low, rng, out, pos):
    while True:
        if ((low ^ ((low + rng) & MASK32)) >= TOP):
            if rng >= BOT:
                break
            rng = (-low) & (BOT - 1)
        out[pos] = (low >> 24) & 0xFF
        pos += 1
        low = (low << 8) & MASK32
        rng = (rng << 8) & MASK32
    return low, rng, pos


@njit(cache=True)
def _enc_bit(bit, p0, low, rng, out, pos):
    bound = (rng >> PROB_BITS) * p0
    if bit == 0:
        rng = bound
    else:
        low = (low + bound) & MASK32
        rng -= bound
    return _enc_normalize(low, rng, out, pos)


@njit(cache=True)
def _adapt(probs, ctx, bit):
    if bit == 0:
        probs[ctx] += (PROB_ONE - probs[ctx]) >> ADAPT_SHIFT
    else:
        probs[ctx] -= probs[ctx] >> ADAPT_SHIFT


@njit(cache=True)
def encode_med(img, n):
    """Encode a 2-D array of n-bit codes; returns the payload bytes."""
    h, w = img.shape
    out = np.zeros(h * w * n * 2 + 64, dtype=np.uint8)
    probs = np.full(1 << n, PROB_ONE // 2, dtype=np.int64)
    mask = (1 << n) - 1
    low = np.int64(0)
    rng = np.int64(MASK32)
    pos = 0
    for i in range(h):
        for j in range(w):
            r = (np.int64(img[i, j]) - _prediction(img, i, j)) & mask
            node = 1
            for b in range(n - 1, -1, -1):
                bit = (r >> b) & 1
                low, rng, pos = _enc_bit(bit, probs[node], low, rng, out, pos)
                _adapt(probs, node, bit)
                node = 2 * node + bit
    for b in range(31, -1, -1):
        low, rng, pos = _enc_bit((END_MARKER >> b) & 1, PROB_ONE // 2, low, rng, out, pos)
    for _ in range(4):
        out[pos] = (low >> 24) & 0xFF
        pos += 1
        low = (low << 8) & MASK32
    return out[:pos].copy()


@njit(cache=True)
def _dec_bit(p0, low, rng, code, data, pos):
    # returns bit, low, rng, code, pos; pos < 0 flags an overrun
    bound = (rng >> PROB_BITS) * p0
    if ((code - low) & MASK32) < bound:
        bit = 0
        rng = bound
    else:
        bit = 1
        low = (low + bound) & MASK32
        rng -= bound
    while True:
        if ((low ^ ((low + rng) & MASK32)) >= TOP):
            if rng >= BOT:
                break
            rng = (-low) & (BOT - 1)
        if pos >= data.shape[0]:
            return bit, low, rng, code, -1
        code = ((code << 8) | np.int64(data[pos])) & MASK32
        pos += 1
        low = (low << 8) & MASK32
        rng = (rng << 8) & MASK32
    return bit, low, rng, code, pos


@njit(cache=True)
def decode_med(data, h, w, n):
    """Inverse of :func:`encode_med`; returns ``(image, status)``."""
    img = np.zeros((h, w), dtype=np.uint8)
    if data.shape[0] < 4:
        return img, ERR_OVERRUN
    probs = np.full(1 << n, PROB_ONE // 2, dtype=np.int64)
    mask = (1 << n) - 1
    code = np.int64(0)
    for k in range(4):
        code = (code << 8) | np.int64(data[k])
    pos = 4
    low = np.int64(0)
    rng = np.int64(MASK32)
    for i in range(h):
        for j in range(w):
            node = 1
            for _ in range(n):
                bit, low, rng, code, pos = _dec_bit(probs[node], low, rng, code, data, pos)
                if pos < 0:
                    return img, ERR_OVERRUN
                _adapt(probs, node, bit)
                node = 2 * node + bit
            r = node - (1 << n)
            img[i, j] = (_prediction(img, i, j) + r) & mask
    marker = np.int64(0)
    for _ in range(32):
        bit, low, rng, code, pos = _dec_bit(PROB_ONE // 2, low, rng, code, data, pos)
        if pos < 0:
            return img, ERR_OVERRUN
        marker = (marker << 1) | bit
    if marker != END_MARKER:
        return img, ERR_MARKER
    if pos != data.shape[0]:
        return img, ERR_TRAILING
    return img, OK
