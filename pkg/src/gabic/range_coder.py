"""Integer range coder with static per-symbol CDF tables.

Coder state is a 64-bit ``low`` (plus one carry bit) and a 64-bit ``range``.
Whenever the range drops below 2**32 the top 32 bits of ``low`` are shifted
out as a big-endian word; carries are propagated through a one-word cache and
a count of pending 0xFFFFFFFF words.  Finishing the stream writes the whole of
``low``, so an empty stream is exactly 8 bytes.

Symbols outside a table's support are coded as the escape bin followed by the
symbol's 32-bit two's-complement value in two uniform 16-bit chunks.

Tables are the only place floating point enters: bin probabilities are
computed in float64, scaled by 2**precision and rounded to nearest (ties to
even); every bin is floored to frequency 1 and the total is then corrected to
exactly 2**precision.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

SIGMA_MIN = 0.04
SIGMA_MAX = 64.0
SCALE_LEVELS = 64
DEFAULT_PRECISION = 16
DEFAULT_TAIL_MASS = 1e-9
RAW_BITS = 32

_MASK32 = 0xFFFFFFFF
_MASK64 = (1 << 64) - 1
_TOP = 1 << 64
_CARRY_LIMIT = 0xFFFFFFFF00000000
_RENORM = 1 << 32


class DecodeError(ValueError):
    """The byte stream is truncated, corrupt, or was coded with other tables."""


@dataclass(frozen=True, eq=False)
class CdfTable:
    precision: int
    cdf: tuple[int, ...]
    offset: int
    escape_index: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "escape_index", len(self.cdf) - 2)

    @property
    def num_symbols(self) -> int:
        """Symbols in the direct support (excluding the escape bin)."""
        return len(self.cdf) - 2

    def freq(self, index: int) -> int:
        return self.cdf[index + 1] - self.cdf[index]

    def freqs(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf, dtype=np.int64))

    def index_of(self, symbol: int) -> int:
        index = symbol - self.offset
        return index if 0 <= index < self.escape_index else self.escape_index

    def probability(self, symbol: int) -> float:
        """Probability the coder actually assigns (escape includes the raw bits)."""
        index = self.index_of(symbol)
        p = self.freq(index) / (1 << self.precision)
        if index == self.escape_index:
            p *= 2.0 ** -RAW_BITS
        return p

    def bits(self, symbol: int) -> float:
        return -math.log2(self.probability(symbol))


def _check_precision(precision: int) -> None:
    if not 8 <= precision <= 24:
        raise ValueError(f"precision must be in [8, 24], got {precision}")


def quantize_pmf(pmf: np.ndarray, precision: int) -> np.ndarray:
    """Integer frequencies summing to 2**precision with every entry ≥ 1."""
    total = 1 << precision
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.size > total:
        raise ValueError(f"{pmf.size} bins cannot be represented at {precision}-bit precision")
    freq = np.maximum(np.rint(pmf * total).astype(np.int64), 1)
    diff = total - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    while diff < 0:
        for i in np.argsort(-freq, kind="stable"):
            if freq[i] > 1:
                freq[i] -= 1
                diff += 1
                if diff == 0:
                    break
    return freq


def build_cdf_from_pmf(pmf: Sequence[float], offset: int, precision: int = DEFAULT_PRECISION) -> CdfTable:
    """Table for symbols ``offset .. offset+len(pmf)-1``; leftover mass goes to the escape bin."""
    _check_precision(precision)
    pmf = np.asarray(pmf, dtype=np.float64)
    escape = max(0.0, 1.0 - float(pmf.sum()))
    freq = quantize_pmf(np.append(pmf, escape), precision)
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return CdfTable(precision, tuple(int(c) for c in cdf), int(offset))


def gaussian_support(sigma: float, tail_mass: float) -> int:
    """Half-width m such that bins -m..m hold at least 1 - tail_mass of N(0, sigma^2)."""
    z = -ndtri(tail_mass / 2.0)
    return max(0, math.ceil(sigma * z - 0.5))


def build_gaussian_cdf(sigma: float, precision: int = DEFAULT_PRECISION,
                       tail_mass: float = DEFAULT_TAIL_MASS) -> CdfTable:
    """Table for round(v - mu) with v ~ N(mu, sigma^2), symbols centred on 0."""
    _check_precision(precision)
    if not 0 < tail_mass < 1e-3:
        raise ValueError(f"tail_mass must be in (0, 1e-3), got {tail_mass}")
    if sigma < SIGMA_MIN:
        raise ValueError(f"sigma {sigma} below minimum {SIGMA_MIN}")
    m = gaussian_support(sigma, tail_mass)
    s = np.arange(-m, m + 1, dtype=np.float64)
    pmf = ndtr((s + 0.5) / sigma) - ndtr((s - 0.5) / sigma)
    return build_cdf_from_pmf(pmf, -m, precision)


def build_logistic_cdf(loc: float, scale: float, precision: int = DEFAULT_PRECISION,
                       tail_mass: float = DEFAULT_TAIL_MASS) -> CdfTable:
    """Table for integer symbols under a logistic(loc, scale) integrated over unit bins."""
    _check_precision(precision)
    half = scale * math.log(2.0 / tail_mass - 1.0)
    lo, hi = math.floor(loc - half), math.ceil(loc + half)
    s = np.arange(lo, hi + 1, dtype=np.float64)
    a = np.abs(s - loc)
    pmf = 1.0 / (1.0 + np.exp(-(0.5 - a) / scale)) - 1.0 / (1.0 + np.exp(-(-0.5 - a) / scale))
    return build_cdf_from_pmf(pmf, lo, precision)


def scale_levels(levels: int = SCALE_LEVELS, lo: float = SIGMA_MIN, hi: float = SIGMA_MAX) -> np.ndarray:
    return np.exp(np.linspace(math.log(lo), math.log(hi), levels))


def scale_index(sigma, levels: int = SCALE_LEVELS, lo: float = SIGMA_MIN, hi: float = SIGMA_MAX) -> np.ndarray:
    """Nearest level (in log scale) of the geometric grid for each sigma."""
    step = (math.log(hi) - math.log(lo)) / (levels - 1)
    s = np.maximum(np.asarray(sigma, dtype=np.float64), lo)
    return np.clip(np.rint((np.log(s) - math.log(lo)) / step), 0, levels - 1).astype(np.int64)


class GaussianTables:
    """Lazily built, then immutable, cache of the scale-grid tables."""

    def __init__(self, precision: int = DEFAULT_PRECISION, tail_mass: float = DEFAULT_TAIL_MASS,
                 levels: int = SCALE_LEVELS):
        self.precision = precision
        self.tail_mass = tail_mass
        self.scales = scale_levels(levels)
        self._tables: dict[int, CdfTable] = {}

    def __getitem__(self, level: int) -> CdfTable:
        table = self._tables.get(level)
        if table is None:
            table = build_gaussian_cdf(float(self.scales[level]), self.precision, self.tail_mass)
            self._tables[level] = table
        return table

    def for_sigmas(self, sigma) -> list[CdfTable]:
        return [self[int(i)] for i in scale_index(sigma, len(self.scales)).reshape(-1)]


# -- coder ---------------------------------------------------------------------------

class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self._cache: int | None = None
        self._pending = 0
        self._out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < _CARRY_LIMIT or low >= _TOP:
            carry = low >> 64
            if self._cache is not None:
                self._out += ((self._cache + carry) & _MASK32).to_bytes(4, "big")
            if self._pending:
                self._out += ((_MASK32 + carry) & _MASK32).to_bytes(4, "big") * self._pending
                self._pending = 0
            self._cache = (low >> 32) & _MASK32
        else:
            self._pending += 1
        self.low = (low & _MASK32) << 32

    def encode(self, cum: int, freq: int, precision: int) -> None:
        r = self.range >> precision
        self.low += r * cum
        self.range = r * freq
        while self.range < _RENORM:
            self.range <<= 32
            self._shift_low()

    def encode_symbol(self, symbol: int, table: CdfTable) -> None:
        index = symbol - table.offset
        cdf = table.cdf
        if 0 <= index < table.escape_index:
            self.encode(cdf[index], cdf[index + 1] - cdf[index], table.precision)
            return
        esc = table.escape_index
        self.encode(cdf[esc], cdf[esc + 1] - cdf[esc], table.precision)
        raw = symbol & _MASK32
        self.encode(raw >> 16, 1, 16)
        self.encode(raw & 0xFFFF, 1, 16)

    def finish(self) -> bytes:
        for _ in range(3):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 8:
            raise DecodeError(f"stream too short: {len(data)} bytes")
        self._data = bytes(data)
        self._pos = 8
        self.code = int.from_bytes(self._data[:8], "big")
        self.range = _MASK64

    def _renormalize(self) -> None:
        while self.range < _RENORM:
            if self._pos + 4 > len(self._data):
                raise DecodeError(f"stream truncated at byte {self._pos}")
            self.code = (self.code << 32) | int.from_bytes(self._data[self._pos:self._pos + 4], "big")
            self._pos += 4
            self.range <<= 32

    def decode_value(self, precision: int) -> tuple[int, int]:
        r = self.range >> precision
        value = self.code // r
        if value >= (1 << precision):
            raise DecodeError("code value outside the coding interval")
        return value, r

    def consume(self, r: int, cum: int, freq: int) -> None:
        self.code -= r * cum
        self.range = r * freq
        if self.code >= self.range:
            raise DecodeError("code value outside the coding interval")
        self._renormalize()

    def decode_symbol(self, table: CdfTable) -> int:
        value, r = self.decode_value(table.precision)
        cdf = table.cdf
        index = bisect_right(cdf, value) - 1
        self.consume(r, cdf[index], cdf[index + 1] - cdf[index])
        if index != table.escape_index:
            return index + table.offset
        hi, r = self.decode_value(16)
        self.consume(r, hi, 1)
        lo, r = self.decode_value(16)
        self.consume(r, lo, 1)
        raw = (hi << 16) | lo
        return raw - (1 << 32) if raw >= (1 << 31) else raw

    @property
    def bytes_consumed(self) -> int:
        return self._pos


def encode(symbols: Sequence[int], tables: Sequence[CdfTable]) -> bytes:
    if len(symbols) != len(tables):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")
    enc = RangeEncoder()
    for symbol, table in zip(symbols, tables):
        symbol = int(symbol)
        if not -(1 << 31) <= symbol < (1 << 31):
            raise ValueError(f"symbol {symbol} outside the 32-bit range")
        enc.encode_symbol(symbol, table)
    return enc.finish()


def decode(data: bytes, tables: Sequence[CdfTable], count: int) -> list[int]:
    if count != len(tables):
        raise ValueError(f"count {count} does not match {len(tables)} tables")
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(table) for table in tables]
    if dec.bytes_consumed != len(data):
        raise DecodeError(f"{len(data) - dec.bytes_consumed} trailing bytes after {count} symbols")
    return out


def ideal_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    """Sum of -log2 p over the quantized tables, escape raw bits included."""
    return float(sum(table.bits(int(s)) for s, table in zip(symbols, tables)))
