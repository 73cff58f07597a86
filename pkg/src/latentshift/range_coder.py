"""Carry-less range coder over 16-bit integer frequency tables.

The coder follows Subbotin's scheme: 32-bit ``low``/``range`` registers,
bytes are shifted out whenever the top byte of ``low`` is settled, and the
range is truncated instead of propagating a carry.  No floating point is used
once the frequency tables exist, so streams are bit-exact across platforms.

Symbols outside a table's support are sent as the escape slot followed by the
raw value as a signed 16-bit integer in two bypass bytes.
"""

from __future__ import annotations

from bisect import bisect_right
from math import log2
from typing import Iterable, Sequence

from .entropy_models import ESCAPE_FREQ, PMF_PRECISION, PMF_TOTAL, DiscretePMF

TOP = 1 << 24
BOT = 1 << 16
MASK32 = 0xFFFFFFFF
BYPASS_BITS = 8


class CoderError(ValueError):
    """Invalid coder input (bad table, unrepresentable symbol)."""


class TruncationError(CoderError):
    """The payload ended before decoding finished."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    return
                self.range = -self.low & (BOT - 1)
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32

    def encode(self, start: int, freq: int, total_bits: int = PMF_PRECISION) -> None:
        r = self.range >> total_bits
        self.low += start * r
        self.range = freq * r
        self._normalize()

    def encode_bypass(self, value: int, bits: int = BYPASS_BITS) -> None:
        self.encode(value, 1, bits)

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncationError(f"payload exhausted after {len(self.data)} bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    return
                self.range = -self.low & (BOT - 1)
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32

    def peek(self, total_bits: int = PMF_PRECISION) -> int:
        """Return the cumulative count the next symbol falls into."""
        self._r = self.range >> total_bits
        value = ((self.code - self.low) & MASK32) // self._r
        if value >= 1 << total_bits:
            raise CoderError("corrupt payload: cumulative value out of range")
        return value

    def consume(self, start: int, freq: int) -> None:
        self.low += start * self._r
        self.range = freq * self._r
        self._normalize()

    def decode_bypass(self, bits: int = BYPASS_BITS) -> int:
        value = self.peek(bits)
        self.consume(value, 1)
        return value


def _check_pmf(pmf: DiscretePMF) -> None:
    if pmf.cumulative[-1] != PMF_TOTAL or pmf.cumulative[-2] != PMF_TOTAL - ESCAPE_FREQ:
        raise CoderError("PMF does not sum to 2**16 with a single escape slot")


def encode_symbols(symbols: Iterable[int], pmfs: Sequence[DiscretePMF]) -> bytes:
    symbols = list(symbols)
    if len(symbols) != len(pmfs):
        raise CoderError(f"{len(symbols)} symbols but {len(pmfs)} PMFs")
    enc = RangeEncoder()
    checked = set()
    for s, pmf in zip(symbols, pmfs):
        if id(pmf) not in checked:
            _check_pmf(pmf)
            checked.add(id(pmf))
        s = int(s)
        idx = s - pmf.lo
        cum = pmf.cumulative
        if 0 <= idx < len(pmf.freqs):
            enc.encode(cum[idx], cum[idx + 1] - cum[idx])
            continue
        if not -(1 << 15) <= s < 1 << 15:
            raise CoderError(f"symbol {s} does not fit the signed 16-bit escape")
        enc.encode(PMF_TOTAL - ESCAPE_FREQ, ESCAPE_FREQ)
        raw = s + (1 << 15)
        enc.encode_bypass(raw >> 8)
        enc.encode_bypass(raw & 0xFF)
    return enc.finish()


def decode_symbols(data: bytes, pmfs: Sequence[DiscretePMF]) -> list[int]:
    dec = RangeDecoder(data)
    out = []
    for pmf in pmfs:
        cum = pmf.cumulative
        value = dec.peek()
        idx = bisect_right(cum, value) - 1
        dec.consume(cum[idx], cum[idx + 1] - cum[idx])
        if idx < len(pmf.freqs):
            out.append(pmf.lo + idx)
        else:
            hi = dec.decode_bypass()
            lo = dec.decode_bypass()
            out.append(((hi << 8) | lo) - (1 << 15))
    return out


def ideal_bits(symbols: Iterable[int], pmfs: Sequence[DiscretePMF]) -> float:
    """Sum of ``-log2(freq / 2**16)`` including escape and bypass costs."""
    total = 0.0
    for s, pmf in zip(symbols, pmfs):
        idx = int(s) - pmf.lo
        if 0 <= idx < len(pmf.freqs):
            total += PMF_PRECISION - log2(pmf.freqs[idx])
        else:
            total += PMF_PRECISION - log2(ESCAPE_FREQ) + 2 * BYPASS_BITS
    return total
