# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: conv3x3, plane/grid sampling, byte-oriented range coder.

Must stay arithmetically in lockstep with vrvc/_kernels_py.py: identical
accumulation orders on forward paths and an identical integer coder, so the
two backends produce bit-identical samples, convolutions and payloads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


# ---------------------------------------------------------------------------
# conv3x3 (zero padding, stride 1); per-pixel accumulation order ci -> ky -> kx
# ---------------------------------------------------------------------------


def conv3x3_fwd(real[:, :, :, ::1] kernels, real[:, :, :, ::1] x):
    # Pass-based accumulation: for each (ci, ky, kx) add the shifted, scaled
    # input row into every output channel.  Per output pixel the terms arrive
    # in (ci, ky, kx) order, exactly like the naive quadruple loop and the
    # numpy fallback, so results are bit-identical; the inner x loop is
    # contiguous for vectorization.
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = kernels.shape[0]
    if real is float:
        out_np = np.zeros((b, co, h, w), dtype=np.float32)
    else:
        out_np = np.zeros((b, co, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ib, o, c, y, xx, ky, kx, yy, x0, x1
    cdef real kv
    for ib in range(b):
        for o in range(co):
            for c in range(ci):
                for ky in range(3):
                    for kx in range(3):
                        kv = kernels[o, c, ky, kx]
                        for y in range(h):
                            yy = y + ky - 1
                            if yy < 0 or yy >= h:
                                continue
                            x0 = 1 - kx if kx < 1 else 0
                            x1 = w if kx < 2 else w - 1
                            for xx in range(x0, x1):
                                out[ib, o, y, xx] += kv * x[ib, c, yy, xx + kx - 1]
    return out_np


def conv3x3_bwd(real[:, :, :, ::1] kernels, real[:, :, :, ::1] x, real[:, :, :, ::1] gy):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = kernels.shape[0]
    if real is float:
        gk_np = np.zeros((co, ci, 3, 3), dtype=np.float32)
        gx_np = np.zeros((b, ci, h, w), dtype=np.float32)
    else:
        gk_np = np.zeros((co, ci, 3, 3), dtype=np.float64)
        gx_np = np.zeros((b, ci, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] gk = gk_np
    cdef real[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t ib, o, c, y, xx, ky, kx, yy, x0, x1
    cdef real kv, acc
    for ib in range(b):
        for o in range(co):
            for c in range(ci):
                for ky in range(3):
                    for kx in range(3):
                        kv = kernels[o, c, ky, kx]
                        acc = 0
                        for y in range(h):
                            yy = y + ky - 1
                            if yy < 0 or yy >= h:
                                continue
                            x0 = 1 - kx if kx < 1 else 0
                            x1 = w if kx < 2 else w - 1
                            for xx in range(x0, x1):
                                acc = acc + gy[ib, o, y, xx] * x[ib, c, yy, xx + kx - 1]
                                gx[ib, c, yy, xx + kx - 1] += kv * gy[ib, o, y, xx]
                        gk[o, c, ky, kx] += acc
    return gk_np, gx_np


# ---------------------------------------------------------------------------
# bilinear plane sampling; corner order (0,0), (1,0), (0,1), (1,1)
# ---------------------------------------------------------------------------


def bilinear_fwd(real[:, :, ::1] plane, double[::1] u, double[::1] v):
    cdef Py_ssize_t c = plane.shape[0], h = plane.shape[1], w = plane.shape[2]
    cdef Py_ssize_t n = u.shape[0]
    if real is float:
        out_np = np.empty((n, c), dtype=np.float32)
    else:
        out_np = np.empty((n, c), dtype=np.float64)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, ch, i0, j0
    cdef double x, y, fx, fy
    cdef real w00, w10, w01, w11
    for i in range(n):
        x = u[i] * (w - 1)
        y = v[i] * (h - 1)
        i0 = <Py_ssize_t>floor(x)
        if i0 < 0:
            i0 = 0
        elif i0 > w - 2:
            i0 = w - 2
        j0 = <Py_ssize_t>floor(y)
        if j0 < 0:
            j0 = 0
        elif j0 > h - 2:
            j0 = h - 2
        fx = x - i0
        fy = y - j0
        w00 = <real>((1 - fx) * (1 - fy))
        w10 = <real>(fx * (1 - fy))
        w01 = <real>((1 - fx) * fy)
        w11 = <real>(fx * fy)
        for ch in range(c):
            out[i, ch] = plane[ch, j0, i0] * w00 + plane[ch, j0, i0 + 1] * w10 \
                + plane[ch, j0 + 1, i0] * w01 + plane[ch, j0 + 1, i0 + 1] * w11
    return out_np


def bilinear_bwd_plane(shape, double[::1] u, double[::1] v, real[:, ::1] gout):
    cdef Py_ssize_t c = shape[0], h = shape[1], w = shape[2]
    cdef Py_ssize_t n = u.shape[0]
    if real is float:
        gp_np = np.zeros((c, h, w), dtype=np.float32)
    else:
        gp_np = np.zeros((c, h, w), dtype=np.float64)
    cdef real[:, :, ::1] gp = gp_np
    cdef Py_ssize_t i, ch, i0, j0, corner
    cdef double x, y, fx, fy
    cdef real wgt
    # corner-major to match the fallback's four add.at passes
    for corner in range(4):
        for i in range(n):
            x = u[i] * (w - 1)
            y = v[i] * (h - 1)
            i0 = <Py_ssize_t>floor(x)
            if i0 < 0:
                i0 = 0
            elif i0 > w - 2:
                i0 = w - 2
            j0 = <Py_ssize_t>floor(y)
            if j0 < 0:
                j0 = 0
            elif j0 > h - 2:
                j0 = h - 2
            fx = x - i0
            fy = y - j0
            if corner == 0:
                wgt = <real>((1 - fx) * (1 - fy))
            elif corner == 1:
                wgt = <real>(fx * (1 - fy))
                i0 += 1
            elif corner == 2:
                wgt = <real>((1 - fx) * fy)
                j0 += 1
            else:
                wgt = <real>(fx * fy)
                i0 += 1
                j0 += 1
            for ch in range(c):
                gp[ch, j0, i0] += wgt * gout[i, ch]
    return gp_np


# ---------------------------------------------------------------------------
# trilinear grid sampling; corner order matches _kernels_py._TRI_CORNERS
# ---------------------------------------------------------------------------


def trilinear_fwd(real[:, :, ::1] grid, double[:, ::1] p):
    cdef Py_ssize_t dx = grid.shape[0], dy = grid.shape[1], dz = grid.shape[2]
    cdef Py_ssize_t n = p.shape[0]
    if real is float:
        out_np = np.empty(n, dtype=np.float32)
    else:
        out_np = np.empty(n, dtype=np.float64)
    cdef real[::1] out = out_np
    cdef Py_ssize_t i, i0, j0, k0
    cdef double x, y, z, fx, fy, fz
    cdef real acc
    for i in range(n):
        x = p[i, 0] * (dx - 1)
        y = p[i, 1] * (dy - 1)
        z = p[i, 2] * (dz - 1)
        i0 = <Py_ssize_t>floor(x)
        if i0 < 0:
            i0 = 0
        elif i0 > dx - 2:
            i0 = dx - 2
        j0 = <Py_ssize_t>floor(y)
        if j0 < 0:
            j0 = 0
        elif j0 > dy - 2:
            j0 = dy - 2
        k0 = <Py_ssize_t>floor(z)
        if k0 < 0:
            k0 = 0
        elif k0 > dz - 2:
            k0 = dz - 2
        fx = x - i0
        fy = y - j0
        fz = z - k0
        acc = grid[i0, j0, k0] * <real>((1 - fx) * (1 - fy) * (1 - fz))
        acc = acc + grid[i0 + 1, j0, k0] * <real>(fx * (1 - fy) * (1 - fz))
        acc = acc + grid[i0, j0 + 1, k0] * <real>((1 - fx) * fy * (1 - fz))
        acc = acc + grid[i0 + 1, j0 + 1, k0] * <real>(fx * fy * (1 - fz))
        acc = acc + grid[i0, j0, k0 + 1] * <real>((1 - fx) * (1 - fy) * fz)
        acc = acc + grid[i0 + 1, j0, k0 + 1] * <real>(fx * (1 - fy) * fz)
        acc = acc + grid[i0, j0 + 1, k0 + 1] * <real>((1 - fx) * fy * fz)
        acc = acc + grid[i0 + 1, j0 + 1, k0 + 1] * <real>(fx * fy * fz)
        out[i] = acc
    return out_np


def trilinear_bwd_grid(shape, double[:, ::1] p, real[::1] gout):
    cdef Py_ssize_t dx = shape[0], dy = shape[1], dz = shape[2]
    cdef Py_ssize_t n = p.shape[0]
    if real is float:
        gg_np = np.zeros((dx, dy, dz), dtype=np.float32)
    else:
        gg_np = np.zeros((dx, dy, dz), dtype=np.float64)
    cdef real[:, :, ::1] gg = gg_np
    cdef Py_ssize_t i, i0, j0, k0, a, b, cc, corner
    cdef double x, y, z, fx, fy, fz, wx, wy, wz
    for corner in range(8):
        a = corner & 1
        b = (corner >> 1) & 1
        cc = (corner >> 2) & 1
        for i in range(n):
            x = p[i, 0] * (dx - 1)
            y = p[i, 1] * (dy - 1)
            z = p[i, 2] * (dz - 1)
            i0 = <Py_ssize_t>floor(x)
            if i0 < 0:
                i0 = 0
            elif i0 > dx - 2:
                i0 = dx - 2
            j0 = <Py_ssize_t>floor(y)
            if j0 < 0:
                j0 = 0
            elif j0 > dy - 2:
                j0 = dy - 2
            k0 = <Py_ssize_t>floor(z)
            if k0 < 0:
                k0 = 0
            elif k0 > dz - 2:
                k0 = dz - 2
            fx = x - i0
            fy = y - j0
            fz = z - k0
            wx = fx if a else 1 - fx
            wy = fy if b else 1 - fy
            wz = fz if cc else 1 - fz
            gg[i0 + a, j0 + b, k0 + cc] += <real>(wx * wy * wz) * gout[i]
    return gg_np


# ---------------------------------------------------------------------------
# range coder (mirror of the pure-python implementation, same byte output)
# ---------------------------------------------------------------------------

cdef unsigned long long _TOP = 1 << 24
cdef unsigned long long _MASK32 = 0xFFFFFFFF


cdef class RangeEncoder:
    cdef unsigned long long low
    cdef unsigned long long range_
    cdef unsigned int cache
    cdef long long cache_size
    cdef bint first
    cdef bytearray out

    def __init__(self):
        self.low = 0
        self.range_ = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.first = True
        self.out = bytearray()

    cdef void _shift_low(self):
        cdef unsigned long long carry
        cdef unsigned int temp
        if self.low < 0xFF000000u or self.low > _MASK32:
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

    cpdef void encode(self, unsigned int cum, unsigned int freq):
        cdef unsigned long long r = self.range_ >> 16
        self.low += cum * r
        self.range_ = freq * r
        while self.range_ < _TOP:
            self.range_ = (self.range_ << 8) & _MASK32
            self._shift_low()

    cpdef void encode_bit(self, int bit):
        self.encode(bit << 15, 1 << 15)

    cpdef void encode_gamma(self, unsigned long long value):
        cdef unsigned long long n = value + 1
        cdef int nbits = 0, i
        cdef unsigned long long tmp = n
        while tmp:
            nbits += 1
            tmp >>= 1
        for i in range(nbits - 1):
            self.encode_bit(0)
        for i in range(nbits - 1, -1, -1):
            self.encode_bit((n >> i) & 1)

    cpdef bytes flush(self):
        cdef int k = 0, i
        cdef unsigned long long tmp = self.range_
        while tmp:
            k += 1
            tmp >>= 1
        k -= 1
        self.low = ((self.low + ((<unsigned long long>1 << k) - 1)) >> k) << k
        for i in range(5):
            self._shift_low()
        cdef bytes data = bytes(self.out)
        return data.rstrip(b"\x00")


cdef class RangeDecoder:
    cdef const unsigned char[::1] data
    cdef bytes _keep
    cdef Py_ssize_t pos
    cdef Py_ssize_t size
    cdef unsigned long long range_
    cdef unsigned long long code

    def __init__(self, data):
        self._keep = bytes(data)
        self.data = self._keep
        self.size = len(self._keep)
        self.pos = 0
        self.range_ = _MASK32
        self.code = 0
        cdef int i
        for i in range(4):
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    cdef unsigned int _byte(self):
        cdef unsigned int b = 0
        if self.pos < self.size:
            b = self.data[self.pos]
        self.pos += 1
        return b

    cpdef unsigned int decode_freq(self):
        cdef unsigned long long r = self.range_ >> 16
        cdef unsigned long long t = self.code / r
        return <unsigned int>(t if t < (1 << 16) else (1 << 16) - 1)

    cpdef void decode(self, unsigned int cum, unsigned int freq):
        cdef unsigned long long r = self.range_ >> 16
        self.code -= cum * r
        self.range_ = freq * r
        while self.range_ < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range_ = (self.range_ << 8) & _MASK32

    cpdef int decode_bit(self):
        cdef int bit = 1 if self.decode_freq() >= (1 << 15) else 0
        self.decode(bit << 15, 1 << 15)
        return bit

    cpdef unsigned long long decode_gamma(self):
        cdef int nbits = 1, i
        while self.decode_bit() == 0:
            nbits += 1
        cdef unsigned long long n = 1
        for i in range(nbits - 1):
            n = (n << 1) | self.decode_bit()
        return n - 1


def rc_encode_all(long long[::1] bins, long long[::1] suffixes,
                  unsigned int[::1] cum_flat, long long[::1] starts, int[::1] lens):
    cdef RangeEncoder enc = RangeEncoder()
    cdef Py_ssize_t m = bins.shape[0], e
    cdef long long s, n, b
    cdef unsigned int lo, hi
    for e in range(m):
        s = starts[e]
        n = lens[e]
        b = bins[e]
        lo = cum_flat[s + b]
        hi = cum_flat[s + b + 1]
        enc.encode(lo, hi - lo)
        if b == 0 or b == n - 1:
            enc.encode_gamma(<unsigned long long>suffixes[e])
    return enc.flush()


def rc_decode_all(data, unsigned int[::1] cum_flat, long long[::1] starts,
                  int[::1] lens, long long[::1] offsets):
    cdef RangeDecoder dec = RangeDecoder(data)
    cdef Py_ssize_t m = starts.shape[0], e
    out_np = np.empty(m, dtype=np.int64)
    cdef long long[::1] symbols = out_np
    cdef long long s, n, lo, hi, mid, b
    cdef unsigned int t
    for e in range(m):
        s = starts[e]
        n = lens[e]
        t = dec.decode_freq()
        lo = 0
        hi = n
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cum_flat[s + mid] <= t:
                lo = mid
            else:
                hi = mid
        b = lo
        dec.decode(cum_flat[s + b], cum_flat[s + b + 1] - cum_flat[s + b])
        if b == 0:
            symbols[e] = offsets[e] - <long long>dec.decode_gamma()
        elif b == n - 1:
            symbols[e] = offsets[e] + (n - 1) + <long long>dec.decode_gamma()
        else:
            symbols[e] = offsets[e] + b
    return out_np
