"""Pure-numpy implementations of the hot kernels.

This is the fallback backend; ``vrvc._kernels`` (Cython) implements the same
functions with identical arithmetic ordering, so forward results and coded
bytes are bit-identical across backends.  Keep accumulation orders in sync
with the .pyx file when touching anything here.
"""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# 3x3 convolution, zero padding, stride 1.
#
# Per output pixel the accumulation order is in_channel -> ky -> kx, matching
# the naive quadruple-loop reference exactly (same sequence of fused
# multiply-free adds at f64).
# ---------------------------------------------------------------------------


def conv3x3_fwd(kernels: np.ndarray, x: np.ndarray) -> np.ndarray:
    """kernels (Co,Ci,3,3), x (B,Ci,H,W) -> (B,Co,H,W)."""
    b, ci, h, w = x.shape
    co = kernels.shape[0]
    xp = np.zeros((b, ci, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((b, co, h, w), dtype=x.dtype)
    for c in range(ci):
        for ky in range(3):
            for kx in range(3):
                out += kernels[None, :, c, ky, kx, None, None] * xp[:, None, c, ky : ky + h, kx : kx + w]
    return out


def conv3x3_bwd(kernels: np.ndarray, x: np.ndarray, gy: np.ndarray):
    """Gradients w.r.t. kernels and input for conv3x3_fwd."""
    b, ci, h, w = x.shape
    co = kernels.shape[0]
    xp = np.zeros((b, ci, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    gk = np.zeros_like(kernels)
    for ky in range(3):
        for kx in range(3):
            gk[:, :, ky, kx] = np.tensordot(gy, xp[:, :, ky : ky + h, kx : kx + w], axes=([0, 2, 3], [0, 2, 3]))
    gyp = np.zeros((b, co, h + 2, w + 2), dtype=gy.dtype)
    gyp[:, :, 1:-1, 1:-1] = gy
    gx = np.zeros_like(x)
    for c in range(co):
        for ky in range(3):
            for kx in range(3):
                gx += kernels[None, c, :, ky, kx, None, None] * gyp[:, None, c, 2 - ky : 2 - ky + h, 2 - kx : 2 - kx + w]
    return gk, gx


# ---------------------------------------------------------------------------
# Bilinear plane sampling with node alignment: u in [0,1] maps to x = u*(W-1).
# Corner add order: (0,0), (1,0), (0,1), (1,1).
# ---------------------------------------------------------------------------


def _bilinear_setup(h, w, u, v):
    x = u * (w - 1)
    y = v * (h - 1)
    i0 = np.clip(np.floor(x), 0, w - 2).astype(np.int64)
    j0 = np.clip(np.floor(y), 0, h - 2).astype(np.int64)
    fx = x - i0
    fy = y - j0
    return i0, j0, fx, fy


def bilinear_fwd(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """plane (C,H,W), u/v (N,) in [0,1] -> samples (N,C).

    Interpolation weights are computed at f64 and cast to the plane dtype
    before the multiply, matching the compiled kernel bit for bit.
    """
    c, h, w = plane.shape
    i0, j0, fx, fy = _bilinear_setup(h, w, u, v)
    dt = plane.dtype
    w00 = ((1 - fx) * (1 - fy)).astype(dt)
    w10 = (fx * (1 - fy)).astype(dt)
    w01 = ((1 - fx) * fy).astype(dt)
    w11 = (fx * fy).astype(dt)
    out = plane[:, j0, i0] * w00
    out += plane[:, j0, i0 + 1] * w10
    out += plane[:, j0 + 1, i0] * w01
    out += plane[:, j0 + 1, i0 + 1] * w11
    return np.ascontiguousarray(out.T)


def bilinear_bwd_plane(shape, u, v, gout):
    """Scatter-add gradient onto a zero plane of `shape` (C,H,W)."""
    c, h, w = shape
    i0, j0, fx, fy = _bilinear_setup(h, w, u, v)
    dt = gout.dtype
    gplane = np.zeros((h * w, c), dtype=dt)
    flat = j0 * w + i0
    np.add.at(gplane, flat, ((1 - fx) * (1 - fy)).astype(dt)[:, None] * gout)
    np.add.at(gplane, flat + 1, (fx * (1 - fy)).astype(dt)[:, None] * gout)
    np.add.at(gplane, flat + w, ((1 - fx) * fy).astype(dt)[:, None] * gout)
    np.add.at(gplane, flat + w + 1, (fx * fy).astype(dt)[:, None] * gout)
    return np.ascontiguousarray(gplane.T.reshape(c, h, w))


def bilinear_bwd_uv(plane, u, v, gout):
    """Gradients w.r.t. the (u, v) sample coordinates."""
    c, h, w = plane.shape
    i0, j0, fx, fy = _bilinear_setup(h, w, u, v)
    p00 = plane[:, j0, i0].T
    p10 = plane[:, j0, i0 + 1].T
    p01 = plane[:, j0 + 1, i0].T
    p11 = plane[:, j0 + 1, i0 + 1].T
    dx = (p10 - p00) * (1 - fy)[:, None] + (p11 - p01) * fy[:, None]
    dy = (p01 - p00) * (1 - fx)[:, None] + (p11 - p10) * fx[:, None]
    gu = np.sum(dx * gout, axis=1) * (w - 1)
    gv = np.sum(dy * gout, axis=1) * (h - 1)
    return gu, gv


# ---------------------------------------------------------------------------
# Trilinear grid sampling, node aligned; p is (N,3) of normalized coords.
# Corner add order: (0,0,0),(1,0,0),(0,1,0),(1,1,0),(0,0,1),(1,0,1),(0,1,1),(1,1,1).
# ---------------------------------------------------------------------------


def _trilinear_setup(shape, p):
    dx, dy, dz = shape
    x = p[:, 0] * (dx - 1)
    y = p[:, 1] * (dy - 1)
    z = p[:, 2] * (dz - 1)
    i0 = np.clip(np.floor(x), 0, dx - 2).astype(np.int64)
    j0 = np.clip(np.floor(y), 0, dy - 2).astype(np.int64)
    k0 = np.clip(np.floor(z), 0, dz - 2).astype(np.int64)
    return i0, j0, k0, x - i0, y - j0, z - k0


_TRI_CORNERS = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]


def _tri_weight(fx, fy, fz, corner):
    a, b, c = corner
    wx = fx if a else (1 - fx)
    wy = fy if b else (1 - fy)
    wz = fz if c else (1 - fz)
    return wx * wy * wz


def trilinear_fwd(grid: np.ndarray, p: np.ndarray) -> np.ndarray:
    """grid (Dx,Dy,Dz), p (N,3) in [0,1]^3 -> values (N,)."""
    i0, j0, k0, fx, fy, fz = _trilinear_setup(grid.shape, p)
    out = np.zeros(p.shape[0], dtype=grid.dtype)
    for corner in _TRI_CORNERS:
        a, b, c = corner
        out += grid[i0 + a, j0 + b, k0 + c] * _tri_weight(fx, fy, fz, corner).astype(grid.dtype)
    return out


def trilinear_bwd_grid(shape, p, gout):
    i0, j0, k0, fx, fy, fz = _trilinear_setup(shape, p)
    dx, dy, dz = shape
    ggrid = np.zeros(dx * dy * dz, dtype=gout.dtype)
    flat = (i0 * dy + j0) * dz + k0
    for corner in _TRI_CORNERS:
        a, b, c = corner
        np.add.at(ggrid, flat + (a * dy + b) * dz + c, _tri_weight(fx, fy, fz, corner).astype(gout.dtype) * gout)
    return ggrid.reshape(shape)


def trilinear_bwd_p(grid, p, gout):
    i0, j0, k0, fx, fy, fz = _trilinear_setup(grid.shape, p)
    dx, dy, dz = grid.shape

    def g(a, b, c):
        return grid[i0 + a, j0 + b, k0 + c]

    dfx = ((g(1, 0, 0) - g(0, 0, 0)) * (1 - fy) + (g(1, 1, 0) - g(0, 1, 0)) * fy) * (1 - fz) + (
        (g(1, 0, 1) - g(0, 0, 1)) * (1 - fy) + (g(1, 1, 1) - g(0, 1, 1)) * fy
    ) * fz
    dfy = ((g(0, 1, 0) - g(0, 0, 0)) * (1 - fx) + (g(1, 1, 0) - g(1, 0, 0)) * fx) * (1 - fz) + (
        (g(0, 1, 1) - g(0, 0, 1)) * (1 - fx) + (g(1, 1, 1) - g(1, 0, 1)) * fx
    ) * fz
    dfz = ((g(0, 0, 1) - g(0, 0, 0)) * (1 - fx) + (g(1, 0, 1) - g(1, 0, 0)) * fx) * (1 - fy) + (
        (g(0, 1, 1) - g(0, 1, 0)) * (1 - fx) + (g(1, 1, 1) - g(1, 1, 0)) * fx
    ) * fy
    gp = np.empty_like(p)
    gp[:, 0] = dfx * gout * (dx - 1)
    gp[:, 1] = dfy * gout * (dy - 1)
    gp[:, 2] = dfz * gout * (dz - 1)
    return gp


# ---------------------------------------------------------------------------
# Byte-oriented range coder (carry-aware, 32-bit range, 16-bit totals).
#
# The first emitted byte of the classic coder carries no information for the
# decoder (it only ever sees 32-bit windows), so it is dropped; the decoder
# primes its code register with 4 bytes.  Trailing zero bytes are stripped at
# flush time -- the decoder zero-pads reads past the end of the payload.
# ---------------------------------------------------------------------------

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.first = True
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                if self.first:
                    self.first = False
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum: int, freq: int):
        """Encode a symbol occupying [cum, cum+freq) of the 1<<16 total."""
        r = self.range >> 16
        self.low += cum * r
        self.range = freq * r
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def encode_bit(self, bit: int):
        self.encode(bit << 15, 1 << 15)

    def encode_gamma(self, value: int):
        """Elias-gamma code for value >= 0 (codes value + 1)."""
        n = value + 1
        nbits = n.bit_length()
        for _ in range(nbits - 1):
            self.encode_bit(0)
        for i in range(nbits - 1, -1, -1):
            self.encode_bit((n >> i) & 1)

    def flush(self) -> bytes:
        # Round low up to a multiple of 2^k (k chosen so the result stays
        # inside [low, low+range)); its trailing zero bytes never need to be
        # emitted because the decoder zero-pads.
        k = self.range.bit_length() - 1
        self.low = ((self.low + (1 << k) - 1) >> k) << k
        for _ in range(5):
            self._shift_low()
        out = bytes(self.out)
        return out.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode_freq(self) -> int:
        self._r = self.range >> 16
        t = self.code // self._r
        return t if t < (1 << 16) else (1 << 16) - 1

    def decode(self, cum: int, freq: int):
        r = self.range >> 16
        self.code -= cum * r
        self.range = freq * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32

    def decode_bit(self) -> int:
        bit = 1 if self.decode_freq() >= (1 << 15) else 0
        self.decode(bit << 15, 1 << 15)
        return bit

    def decode_gamma(self) -> int:
        nbits = 1
        while self.decode_bit() == 0:
            nbits += 1
        n = 1
        for _ in range(nbits - 1):
            n = (n << 1) | self.decode_bit()
        return n - 1


def rc_encode_all(bins, suffixes, cum_flat, starts, lens) -> bytes:
    """Encode one symbol per CDF row; edge bins carry a gamma-coded suffix."""
    enc = RangeEncoder()
    m = len(bins)
    for e in range(m):
        s = starts[e]
        n = lens[e]
        b = bins[e]
        lo = int(cum_flat[s + b])
        hi = int(cum_flat[s + b + 1])
        enc.encode(lo, hi - lo)
        if b == 0 or b == n - 1:
            enc.encode_gamma(int(suffixes[e]))
    return enc.flush()


def rc_decode_all(data, cum_flat, starts, lens, offsets):
    """Inverse of rc_encode_all; returns the integer symbols."""
    dec = RangeDecoder(data)
    m = len(starts)
    symbols = np.empty(m, dtype=np.int64)
    for e in range(m):
        s = starts[e]
        n = lens[e]
        t = dec.decode_freq()
        # binary search for the bin with cum[b] <= t < cum[b+1]
        lo, hi = 0, n
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cum_flat[s + mid] <= t:
                lo = mid
            else:
                hi = mid
        b = lo
        dec.decode(int(cum_flat[s + b]), int(cum_flat[s + b + 1] - cum_flat[s + b]))
        if b == 0:
            symbols[e] = offsets[e] - dec.decode_gamma()
        elif b == n - 1:
            symbols[e] = offsets[e] + (n - 1) + dec.decode_gamma()
        else:
            symbols[e] = offsets[e] + b
    return symbols
