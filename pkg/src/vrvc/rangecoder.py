"""Integer probability tables and the symbol-level coding API.

The float Gaussian model only decides probabilities here; everything that
touches the byte stream is integer (16-bit CDF rows), so encoder and decoder
agree bit-for-bit as long as they derive tables from identical (mu, sigma)
inputs.  Symbols outside a row's window are escape-coded through the edge
bins with an Elias-gamma suffix and never fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import kernels
from .autodiff import round_half_away

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
WINDOW_SIGMAS = 6.0
WINDOW_MIN = 2
WINDOW_CAP = 1 << 10
_CHUNK = 8192


@dataclass
class CdfTables:
    """Per-element integer CDF rows in one flat buffer."""

    starts: np.ndarray  # int64 (N,), row start offsets into cum_flat
    lens: np.ndarray  # int32 (N,), bins per row
    cum_flat: np.ndarray  # uint32, concatenated rows of length lens[i]+1
    offsets: np.ndarray  # int64 (N,), symbol value of bin 0

    def row(self, i: int) -> np.ndarray:
        s = self.starts[i]
        return self.cum_flat[s : s + self.lens[i] + 1]


def symbol_probability(q, mu, sigma, a):
    """Box probability of integer symbol(s) q under N(mu, sigma) quantized with step a.

    Evaluated in the scaled (symbol) domain: m = mu/a, s = sigma/a.
    Sums to 1 over all integers by construction.
    """
    q = np.asarray(q, dtype=np.float64)
    m = np.asarray(mu, dtype=np.float64) / a
    s = np.asarray(sigma, dtype=np.float64) / a
    return _sp.ndtr((q + 0.5 - m) / s) - _sp.ndtr((q - 0.5 - m) / s)


def _quantize_rows(probs: np.ndarray, n: int) -> np.ndarray:
    """(rows, n) float probs -> (rows, n) uint32 integer frequencies summing to TOTAL.

    Every bin gets frequency >= 1; the residual lands on the most probable bin.
    """
    scaled = np.floor(probs * (TOTAL - n)).astype(np.int64) + 1
    deficit = TOTAL - scaled.sum(axis=1)
    amax = probs.argmax(axis=1)
    scaled[np.arange(scaled.shape[0]), amax] += deficit
    if np.any(scaled < 1):
        raise AssertionError("CDF quantization produced an empty bin")
    return scaled.astype(np.uint32)


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray, a: float) -> CdfTables:
    """Integer CDF rows for symbols q = round(y/a) under N(mu, sigma) on y.

    Window per element: round(m) +- max(2, ceil(6 s)) in the scaled domain,
    capped; the two edge bins absorb the tails so each row sums to 1.
    """
    m = np.asarray(mu, dtype=np.float64).reshape(-1) / a
    s = np.asarray(sigma, dtype=np.float64).reshape(-1) / a
    nelem = m.size
    if nelem == 0:
        return CdfTables(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.uint32), np.zeros(0, dtype=np.int64)
        )
    half = np.clip(np.ceil(WINDOW_SIGMAS * s), WINDOW_MIN, WINDOW_CAP).astype(np.int64)
    lens = (2 * half + 1).astype(np.int32)
    centers = round_half_away(m).astype(np.int64)
    offsets = centers - half
    starts = np.zeros(nelem, dtype=np.int64)
    np.cumsum(lens[:-1] + 1, out=starts[1:])
    cum_flat = np.empty(int(starts[-1]) + int(lens[-1]) + 1, dtype=np.uint32)

    for lo in range(0, nelem, _CHUNK):
        hi = min(lo + _CHUNK, nelem)
        _fill_rows(cum_flat, starts[lo:hi], lens[lo:hi], offsets[lo:hi], m[lo:hi], s[lo:hi])
    return CdfTables(starts, lens, cum_flat, offsets)


def _fill_rows(cum_flat, starts, lens, offsets, m, s):
    rows = m.size
    nmax = int(lens.max())
    # bin boundaries at q + 0.5 for q = offset .. offset + n - 2
    j = np.arange(nmax - 1)
    qb = offsets[:, None] + j[None, :]
    z = (qb + 0.5 - m[:, None]) / s[:, None]
    cdf = _sp.ndtr(z)
    probs = np.zeros((rows, nmax), dtype=np.float64)
    probs[:, 0] = cdf[:, 0]
    probs[:, 1 : nmax - 1] = cdf[:, 1:] - cdf[:, :-1]
    last = lens.astype(np.int64) - 1
    ridx = np.arange(rows)
    probs[ridx, last] = 1.0 - cdf[ridx, last - 1]
    freqs = _quantize_padded(probs, lens)
    cum_rows = np.cumsum(freqs, axis=1)
    # scatter ragged rows [0, cumsum...] into the flat buffer in one pass
    row_buf_lens = lens.astype(np.int64) + 1  # leading 0 + n cumulative values
    rowid = np.repeat(ridx, row_buf_lens)
    local_starts = starts - starts[0]
    pos = np.arange(int(row_buf_lens.sum())) - np.repeat(local_starts, row_buf_lens)
    vals = np.where(pos == 0, 0, cum_rows[rowid, np.maximum(pos - 1, 0)])
    cum_flat[starts[0] : starts[0] + vals.size] = vals.astype(np.uint32)


def _quantize_padded(probs: np.ndarray, lens: np.ndarray) -> np.ndarray:
    rows, nmax = probs.shape
    ns = lens.astype(np.int64)
    scaled = np.floor(probs * (TOTAL - ns)[:, None]).astype(np.int64) + 1
    mask = np.arange(nmax)[None, :] < ns[:, None]
    scaled = np.where(mask, scaled, 0)
    deficit = TOTAL - scaled.sum(axis=1)
    masked_probs = np.where(mask, probs, -1.0)
    amax = masked_probs.argmax(axis=1)
    scaled[np.arange(rows), amax] += deficit
    if np.any(scaled[mask] < 1):
        raise AssertionError("CDF quantization produced an empty bin")
    return scaled


def encode_symbols(symbols: np.ndarray, tables: CdfTables) -> bytes:
    """Range-encode integer symbols against their per-element CDF rows."""
    q = np.asarray(symbols, dtype=np.int64).reshape(-1)
    n = tables.lens.astype(np.int64)
    rel = q - tables.offsets
    bins = np.clip(rel, 0, n - 1)
    suffixes = np.zeros_like(q)
    low = rel <= 0
    suffixes[low] = -rel[low]
    high = rel >= n - 1
    suffixes[high] = rel[high] - (n[high] - 1)
    return kernels.rc_encode_all(
        np.ascontiguousarray(bins),
        np.ascontiguousarray(suffixes),
        np.ascontiguousarray(tables.cum_flat),
        np.ascontiguousarray(tables.starts),
        np.ascontiguousarray(tables.lens),
    )


def decode_symbols(data: bytes, tables: CdfTables) -> np.ndarray:
    """Inverse of encode_symbols; exact for any payload produced by it."""
    return kernels.rc_decode_all(
        data,
        np.ascontiguousarray(tables.cum_flat),
        np.ascontiguousarray(tables.starts),
        np.ascontiguousarray(tables.lens),
        np.ascontiguousarray(tables.offsets),
    )


def uniform_tables(nelem: int, nsymbols: int) -> CdfTables:
    """nelem identical rows of a uniform alphabet (testing / calibration)."""
    freq = TOTAL // nsymbols
    rem = TOTAL - freq * nsymbols
    freqs = np.full(nsymbols, freq, dtype=np.int64)
    freqs[0] += rem
    cum = np.concatenate([[0], np.cumsum(freqs)]).astype(np.uint32)
    row_len = nsymbols + 1
    cum_flat = np.tile(cum, nelem)
    starts = np.arange(nelem, dtype=np.int64) * row_len
    lens = np.full(nelem, nsymbols, dtype=np.int32)
    offsets = np.zeros(nelem, dtype=np.int64)
    return CdfTables(starts, lens, cum_flat, offsets)


def estimate_bits(symbols: np.ndarray, mu, sigma, a, floor: float = 1e-12) -> float:
    """Float-model code length of frozen symbols: -sum log2 p(q)."""
    p = np.maximum(symbol_probability(symbols, mu, sigma, a), floor)
    return float(-np.sum(np.log2(p)))
