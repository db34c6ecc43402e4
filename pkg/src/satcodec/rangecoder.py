"""Range coder with 16-bit quantized frequencies and discretized continuous models.

Byte layout is normative:

* The encoder keeps a 64-bit ``low`` and 32-bit ``range``; ``range >> 16``
  scales the cumulative frequency. Pending 0xFF bytes are held back until a
  carry is resolved (LZMA-style cache), then flushed big-endian.
* A finished stream is the produced bytes followed by a 5-byte flush; the
  first byte is always 0x00.

Symbols of a discretized model live in a per-position window
``[round(mu) - h, round(mu) + h]`` with ``h = min(ceil(16 * scale), 255)``.
Index 0 of the alphabet is an escape: values outside the window are sent as
the escape symbol, one direction bit and an order-0 Exp-Golomb code of the
distance past the window edge, each bit at probability 1/2.
"""

from __future__ import annotations

import math
from bisect import bisect_right

import numpy as np
from scipy.special import expit, ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
TAIL_SCALES = 16
MAX_HALF_WIDTH = 255
SYMBOL_MIN = -(1 << 15)
SYMBOL_MAX = (1 << 15) - 1

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_HALF = TOTAL // 2


class RangeDecodeError(ValueError):
    """The byte stream is truncated, has trailing bytes, or is otherwise corrupt."""


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low >= 1 << 32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum: int, freq: int) -> None:
        """Narrow the interval to ``[cum, cum + freq) / TOTAL``."""
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit: int) -> None:
        self.encode(_HALF if bit else 0, _HALF)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = bytes(data)
        self.pos = 0
        if len(self.data) < 5:
            raise RangeDecodeError(f"stream too short: {len(self.data)} bytes, need at least 5")
        if self.data[0] != 0:
            raise RangeDecodeError("stream does not start with 0x00")
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise RangeDecodeError("stream truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        value = self.code // self._r
        if value >= TOTAL:
            raise RangeDecodeError("corrupt stream (target outside frequency table)")
        return value

    def consume(self, cum: int, freq: int) -> None:
        self.code -= self._r * cum
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def decode_bit(self) -> int:
        bit = 1 if self.target() >= _HALF else 0
        self.consume(_HALF if bit else 0, _HALF)
        return bit

    def close(self) -> None:
        if self.pos != len(self.data):
            raise RangeDecodeError(f"{len(self.data) - self.pos} trailing bytes after last symbol")


# ---------------------------------------------------------------------------
# discretized continuous models


class DiscretizedModel:
    """Per-position continuous density discretized onto unit bins.

    Subclasses provide ``_cdf(x, idx)`` and ``_sf(x, idx)`` evaluated
    elementwise; encoder and decoder call the same functions, so both sides
    derive identical frequency tables.
    """

    def __init__(self, center: np.ndarray, scale: np.ndarray):
        scale = np.asarray(scale, dtype=np.float64).ravel()
        if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
            raise ValueError("model scales must be positive and finite")
        self.center = np.asarray(center, dtype=np.float64).ravel()
        self.scale = scale
        mid = np.clip(np.floor(self.center + 0.5), SYMBOL_MIN, SYMBOL_MAX)
        half = np.minimum(np.ceil(TAIL_SCALES * self.scale), MAX_HALF_WIDTH)
        self.lo = np.maximum(mid - half, SYMBOL_MIN).astype(np.int64)
        self.hi = np.minimum(mid + half, SYMBOL_MAX).astype(np.int64)
        self.n_alpha = (self.hi - self.lo + 2).astype(np.int64)  # window + escape

    def __len__(self) -> int:
        return self.center.size

    def _cdf(self, x, idx):  # pragma: no cover - abstract
        raise NotImplementedError

    def _sf(self, x, idx):  # pragma: no cover - abstract
        raise NotImplementedError

    def quantized_cdf(self, k: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Cumulative frequency Q(k) for alphabet index ``k`` (0 = escape) at positions ``idx``."""
        k = np.asarray(k, dtype=np.int64)
        lo, n = self.lo[idx], self.n_alpha[idx]
        upper_tail = self._sf(self.hi[idx] + 0.5, idx)
        g = upper_tail + self._cdf(lo - 1.5 + k, idx)
        g = np.clip(g, 0.0, 1.0)
        q = np.floor(g * (TOTAL - n)).astype(np.int64) + k
        q = np.where(k == 0, 0, q)
        return np.where(k >= n, TOTAL, q)

    def table(self, i: int) -> np.ndarray:
        n = int(self.n_alpha[i])
        k = np.arange(n + 1)
        return self.quantized_cdf(k, np.full(n + 1, i))

    def probability(self, k: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return (self.quantized_cdf(k + 1, idx) - self.quantized_cdf(k, idx)) / TOTAL


class DiscretizedGaussian(DiscretizedModel):
    def _cdf(self, x, idx):
        return ndtr((x - self.center[idx]) / self.scale[idx])

    def _sf(self, x, idx):
        return ndtr((self.center[idx] - x) / self.scale[idx])


class DiscretizedLogistic(DiscretizedModel):
    def _cdf(self, x, idx):
        return expit((x - self.center[idx]) / self.scale[idx])

    def _sf(self, x, idx):
        return expit((self.center[idx] - x) / self.scale[idx])


def _alphabet_index(symbols: np.ndarray, model: DiscretizedModel) -> np.ndarray:
    inside = (symbols >= model.lo) & (symbols <= model.hi)
    return np.where(inside, symbols - model.lo + 1, 0)


def _encode_escape(enc: RangeEncoder, value: int, lo: int, hi: int) -> None:
    above = value > hi
    dist = value - hi - 1 if above else lo - 1 - value
    enc.encode_bit(int(above))
    v = dist + 1
    nbits = v.bit_length()
    for _ in range(nbits - 1):
        enc.encode_bit(0)
    for b in range(nbits - 1, -1, -1):
        enc.encode_bit((v >> b) & 1)


def _decode_escape(dec: RangeDecoder, lo: int, hi: int) -> int:
    above = dec.decode_bit()
    zeros = 0
    while dec.decode_bit() == 0:
        zeros += 1
        if zeros > 17:
            raise RangeDecodeError("corrupt escape code")
    v = 1
    for _ in range(zeros):
        v = (v << 1) | dec.decode_bit()
    dist = v - 1
    value = hi + 1 + dist if above else lo - 1 - dist
    if not SYMBOL_MIN <= value <= SYMBOL_MAX:
        raise RangeDecodeError("escaped symbol outside alphabet")
    return value


def encode_symbols(symbols, model: DiscretizedModel) -> bytes:
    """Range-code integer ``symbols`` (any shape, raveled C-order) under ``model``."""
    s = np.asarray(symbols).ravel().astype(np.int64)
    if s.size != len(model):
        raise ValueError(f"{s.size} symbols but model has {len(model)} positions")
    if s.size and (s.min() < SYMBOL_MIN or s.max() > SYMBOL_MAX):
        raise ValueError("symbol outside the coder alphabet [-2^15, 2^15)")
    idx = np.arange(s.size)
    k = _alphabet_index(s, model)
    cum = model.quantized_cdf(k, idx)
    freq = model.quantized_cdf(k + 1, idx) - cum
    enc = RangeEncoder()
    lo, hi = model.lo, model.hi
    for i, (c, f, kk) in enumerate(zip(cum.tolist(), freq.tolist(), k.tolist())):
        enc.encode(c, f)
        if kk == 0:
            _encode_escape(enc, int(s[i]), int(lo[i]), int(hi[i]))
    return enc.finish()


def _ragged_tables(model: DiscretizedModel, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated Q(0..n) tables for positions ``start:stop`` plus their offsets."""
    sizes = model.n_alpha[start:stop] + 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    idx = np.repeat(np.arange(start, stop), sizes)
    k = np.arange(offsets[-1]) - np.repeat(offsets[:-1], sizes)
    return model.quantized_cdf(k, idx), offsets


def decode_symbols(data: bytes, model: DiscretizedModel, block: int = 4096) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; returns a flat int32 array."""
    dec = RangeDecoder(data)
    n = len(model)
    out = np.empty(n, dtype=np.int32)
    lo, hi = model.lo.tolist(), model.hi.tolist()
    for start in range(0, n, block):
        stop = min(start + block, n)
        flat, offsets = _ragged_tables(model, start, stop)
        flat = flat.tolist()
        offsets = offsets.tolist()
        for j in range(stop - start):
            i = start + j
            base = offsets[j]
            target = dec.target()
            a = bisect_right(flat, target, base, offsets[j + 1]) - 1
            dec.consume(flat[a], flat[a + 1] - flat[a])
            a -= base
            out[i] = lo[i] + a - 1 if a else _decode_escape(dec, lo[i], hi[i])
    dec.close()
    return out


def code_length_bound(model: DiscretizedModel, symbols) -> float:
    """Sum of ceil(-log2 q) over the quantized probabilities actually used (escape bits excluded)."""
    s = np.asarray(symbols).ravel().astype(np.int64)
    idx = np.arange(s.size)
    p = model.probability(_alphabet_index(s, model), idx)
    return float(math.fsum(np.ceil(-np.log2(p)).tolist()))
