"""Byte-renormalizing range coder over quantized CDF tables.

32-bit range, 64-bit low with carry propagation (cache + pending 0xFF run).
Tables are integer cumulative frequencies ``cdf[0] = 0 < ... < cdf[n] = 2**shift``.
When a table carries an escape symbol (its last entry), values outside the
retained alphabet are coded as the escape followed by a flat Elias-gamma
style payload.

The hot loops are numba-compiled kernels over flat table arrays; the
:class:`RangeEncoder`/:class:`RangeDecoder` classes are thin stateful
wrappers around them.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numba
import numpy as np

PRECISION = 16
# escape payload: 6-bit exponent, magnitudes below 2**62
_MAX_ESCAPE_BITS = 62


class RangeCoderError(ValueError):
    """Symbol cannot be coded, or a stream failed to decode."""


# --- kernels ----------------------------------------------------------------
# encoder state: [low, range, cache, cache_size, skip_first]
# decoder state: [code, range, pos, r]


@numba.njit(cache=True)
def _emit(state, buf, pos, byte):
    if state[4] != 0:
        state[4] = 0
        return pos
    buf[pos] = byte
    return pos + 1


@numba.njit(cache=True)
def _shift_low(state, buf, pos):
    low = state[0]
    if (low & 0xFFFFFFFF) < 0xFF000000 or (low >> 32) != 0:
        carry = low >> 32
        temp = state[2]
        while True:
            pos = _emit(state, buf, pos, (temp + carry) & 0xFF)
            temp = 0xFF
            state[3] -= 1
            if state[3] == 0:
                break
        state[2] = (low >> 24) & 0xFF
    state[3] += 1
    state[0] = (low & 0x00FFFFFF) << 8
    return pos


@numba.njit(cache=True)
def _put(state, buf, pos, cum, freq, shift):
    r = state[1] >> shift
    state[0] += r * cum
    state[1] = r * freq
    while state[1] < 0x1000000:
        state[1] = state[1] << 8
        pos = _shift_low(state, buf, pos)
    return pos


@numba.njit(cache=True)
def _bit_length(m):
    n = 0
    while m > 0:
        m >>= 1
        n += 1
    return n


@numba.njit(cache=True)
def _put_escape(state, buf, pos, above, d):
    pos = _put(state, buf, pos, above, 1, 1)
    m = d + 1
    nb = _bit_length(m) - 1
    pos = _put(state, buf, pos, nb, 1, 6)
    rem = nb
    while rem > 0:
        take = min(rem, 16)
        rem -= take
        chunk = (m >> rem) & ((1 << take) - 1)
        pos = _put(state, buf, pos, chunk, 1, take)
    return pos


@numba.njit(cache=True)
def encode_kernel(state, buf, pos, symbols, cdf_flat, starts, lengths, los, escape, shift):
    """Encode ``symbols[i]`` with table ``i``; returns new buffer position or -1-i on error."""
    for i in range(symbols.shape[0]):
        base = starts[i]
        n = lengths[i] - 1
        nret = n - 1 if escape else n
        idx = symbols[i] - los[i]
        if 0 <= idx < nret:
            lo = cdf_flat[base + idx]
            pos = _put(state, buf, pos, lo, cdf_flat[base + idx + 1] - lo, shift)
        else:
            if not escape:
                return -1 - i
            lo = cdf_flat[base + nret]
            freq = cdf_flat[base + n] - lo
            if freq <= 0:
                return -1 - i
            pos = _put(state, buf, pos, lo, freq, shift)
            if idx >= nret:
                d = idx - nret
                above = 1
            else:
                d = -idx - 1
                above = 0
            if d + 1 >= (1 << _MAX_ESCAPE_BITS):
                return -1 - i
            pos = _put_escape(state, buf, pos, above, d)
    return pos


@numba.njit(cache=True)
def finish_kernel(state, buf, pos):
    # any value in [low, low + range) identifies the stream; rounding low up
    # to a multiple of 2**24 leaves three zero bytes that the caller trims
    state[0] = (state[0] + 0xFFFFFF) & ~0xFFFFFF
    for _ in range(5):
        pos = _shift_low(state, buf, pos)
    return pos


@numba.njit(cache=True)
def _next_byte(state, buf, nbytes):
    p = state[2]
    state[2] = p + 1
    if p < nbytes:
        return np.int64(buf[p])
    return np.int64(0)


@numba.njit(cache=True)
def decoder_init_kernel(state, buf, nbytes):
    state[0] = 0
    state[1] = 0xFFFFFFFF
    state[2] = 0
    for _ in range(4):
        state[0] = (state[0] << 8) | _next_byte(state, buf, nbytes)


@numba.njit(cache=True)
def _target(state, shift):
    r = state[1] >> shift
    state[3] = r
    v = state[0] // r
    top = (1 << shift) - 1
    if v > top:
        v = top
    return v


@numba.njit(cache=True)
def _advance(state, buf, nbytes, cum, freq):
    r = state[3]
    state[0] = state[0] - r * cum
    state[1] = r * freq
    while state[1] < 0x1000000:
        state[0] = ((state[0] << 8) | _next_byte(state, buf, nbytes)) & 0xFFFFFFFF
        state[1] = state[1] << 8


@numba.njit(cache=True)
def _get_raw(state, buf, nbytes, shift):
    v = _target(state, shift)
    _advance(state, buf, nbytes, v, 1)
    return v


@numba.njit(cache=True)
def decode_kernel(state, buf, nbytes, out, cdf_flat, starts, lengths, los, escape, shift):
    """Decode ``out.shape[0]`` symbols; returns 0, or -1-i on a corrupt escape."""
    for i in range(out.shape[0]):
        base = starts[i]
        n = lengths[i] - 1
        v = _target(state, shift)
        # largest s with cdf[s] <= v
        a = 0
        b = n
        while b - a > 1:
            mid = (a + b) >> 1
            if cdf_flat[base + mid] <= v:
                a = mid
            else:
                b = mid
        lo = cdf_flat[base + a]
        _advance(state, buf, nbytes, lo, cdf_flat[base + a + 1] - lo)
        nret = n - 1 if escape else n
        if escape and a == nret:
            above = _get_raw(state, buf, nbytes, 1)
            nb = _get_raw(state, buf, nbytes, 6)
            if nb >= _MAX_ESCAPE_BITS:
                return -1 - i
            m = np.int64(1)
            rem = nb
            while rem > 0:
                take = min(rem, 16)
                rem -= take
                m = (m << take) | _get_raw(state, buf, nbytes, take)
            d = m - 1
            if above == 1:
                out[i] = los[i] + nret + d
            else:
                out[i] = los[i] - 1 - d
        else:
            out[i] = los[i] + a
    return 0


# --- table packing ----------------------------------------------------------


class TableSet:
    """A sequence of CDF tables flattened for the kernels.

    ``los[i]`` is the symbol value represented by index 0 of table ``i``.
    """

    def __init__(self, cdf_flat, starts, lengths, los):
        self.cdf_flat = np.ascontiguousarray(cdf_flat, dtype=np.int64)
        self.starts = np.ascontiguousarray(starts, dtype=np.int64)
        self.lengths = np.ascontiguousarray(lengths, dtype=np.int64)
        self.los = np.ascontiguousarray(los, dtype=np.int64)

    def __len__(self):
        return self.starts.shape[0]

    @classmethod
    def from_tables(cls, tables: Sequence[np.ndarray], los: Optional[Sequence[int]] = None):
        lengths = np.array([len(t) for t in tables], dtype=np.int64)
        starts = np.zeros(len(tables), dtype=np.int64)
        if len(tables):
            starts[1:] = np.cumsum(lengths)[:-1]
            flat = np.concatenate([np.asarray(t, dtype=np.int64) for t in tables])
        else:
            flat = np.zeros(0, dtype=np.int64)
        if los is None:
            los = np.zeros(len(tables), dtype=np.int64)
        return cls(flat, starts, lengths, los)

    @classmethod
    def repeat(cls, table: np.ndarray, count: int, lo: int = 0):
        """The same table used for ``count`` consecutive symbols."""
        table = np.asarray(table, dtype=np.int64)
        return cls(
            table,
            np.zeros(count, dtype=np.int64),
            np.full(count, len(table), dtype=np.int64),
            np.full(count, lo, dtype=np.int64),
        )

    def gather(self, index: np.ndarray) -> "TableSet":
        """Tables reordered/repeated by ``index`` (shares the flat storage)."""
        return TableSet(self.cdf_flat, self.starts[index], self.lengths[index], self.los[index])

    def code_length(self, symbols, escape: bool = False, shift: int = PRECISION) -> np.ndarray:
        """Ideal bits per symbol under these tables, escape payloads included.

        Matches what :class:`RangeEncoder` spends up to the coder's own
        overhead (a few bytes per stream).
        """
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if symbols.shape[0] != len(self):
            raise ValueError(f"{symbols.shape[0]} symbols for {len(self)} tables")
        n = self.lengths - 1
        nret = n - 1 if escape else n
        idx = symbols - self.los
        inside = (idx >= 0) & (idx < nret)
        if not escape and not inside.all():
            raise RangeCoderError("symbol outside table without escape")
        slot = np.where(inside, idx, nret)
        freq = self.cdf_flat[self.starts + slot + 1] - self.cdf_flat[self.starts + slot]
        bits = shift - np.log2(np.maximum(freq, 1))
        d = np.where(idx >= nret, idx - nret, -idx - 1)
        # sign bit, 6-bit exponent, then the mantissa below the leading one
        payload = 7 + np.floor(np.log2(np.maximum(d, 0) + 1.0))
        return np.where(inside, bits, bits + payload)


def validate_cdf(cdf: np.ndarray, shift: int = PRECISION):
    cdf = np.asarray(cdf)
    if cdf.ndim != 1 or cdf.size < 2:
        raise RangeCoderError("cdf needs at least two entries")
    if cdf[0] != 0 or cdf[-1] != (1 << shift):
        raise RangeCoderError(f"cdf must run from 0 to {1 << shift}")
    if np.any(np.diff(cdf) <= 0):
        raise RangeCoderError("cdf must be strictly increasing")


# --- stateful wrappers -------------------------------------------------------


class RangeEncoder:
    """Sequential range encoder producing one self-contained byte payload."""

    def __init__(self, shift: int = PRECISION):
        self.shift = shift
        self._state = np.array([0, 0xFFFFFFFF, 0, 1, 1], dtype=np.int64)
        self._buf = np.zeros(256, dtype=np.uint8)
        self._pos = 0
        self._finished = False

    def _reserve(self, nsymbols: int):
        need = self._pos + 12 * nsymbols + 16
        if need > self._buf.shape[0]:
            grown = np.zeros(max(need, 2 * self._buf.shape[0]), dtype=np.uint8)
            grown[: self._pos] = self._buf[: self._pos]
            self._buf = grown

    def encode(self, symbols, tables: TableSet, escape: bool = False):
        if self._finished:
            raise RangeCoderError("encoder already finished")
        symbols = np.ascontiguousarray(symbols, dtype=np.int64).reshape(-1)
        if symbols.shape[0] != len(tables):
            raise RangeCoderError(
                f"{symbols.shape[0]} symbols but {len(tables)} tables"
            )
        self._reserve(symbols.shape[0])
        pos = encode_kernel(
            self._state, self._buf, self._pos, symbols, tables.cdf_flat,
            tables.starts, tables.lengths, tables.los, escape, self.shift,
        )
        if pos < 0:
            i = -1 - pos
            raise RangeCoderError(f"symbol {symbols[i]} at position {i} is not codable")
        self._pos = pos

    def encode_symbol(self, symbol: int, cdf, lo: int = 0, escape: bool = False):
        validate_cdf(cdf, self.shift)
        self.encode([symbol], TableSet.repeat(cdf, 1, lo), escape=escape)

    def finish(self) -> bytes:
        if not self._finished:
            self._reserve(1)
            self._pos = finish_kernel(self._state, self._buf, self._pos)
            self._finished = True
        return bytes(self._buf[: self._pos]).rstrip(b"\x00")


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; reads only within ``data``."""

    def __init__(self, data: bytes, shift: int = PRECISION):
        self.shift = shift
        self._buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._n = self._buf.shape[0]
        self._state = np.zeros(4, dtype=np.int64)
        decoder_init_kernel(self._state, self._buf, self._n)

    def decode(self, tables: TableSet, escape: bool = False) -> np.ndarray:
        out = np.zeros(len(tables), dtype=np.int64)
        status = decode_kernel(
            self._state, self._buf, self._n, out, tables.cdf_flat,
            tables.starts, tables.lengths, tables.los, escape, self.shift,
        )
        if status < 0:
            raise RangeCoderError(f"corrupt escape payload at symbol {-1 - status}")
        return out

    def decode_symbol(self, cdf, lo: int = 0, escape: bool = False) -> int:
        return int(self.decode(TableSet.repeat(cdf, 1, lo), escape=escape)[0])

    @property
    def bytes_consumed(self) -> int:
        return min(int(self._state[2]), self._n)
