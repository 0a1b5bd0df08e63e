"""Self-describing binary container for one coded group of frames.

Little-endian layout, version 1:

    magic    4s   "VRVC"
    version  u8   1
    C        u16  feature channels
    plane dims    u16 x 6: (H, W) for xy, yz, xz
    grid dims     u16 x 3
    bbox     f32 x 6 (lower xyz, upper xyz)
    N        u8   frames in the group
    R        u8   rate-point count, then R x (f32 lambda, f32 a)
    phi      u32 length + raw f32 block (color decoder weights)
    entropy  u32 length + raw f32 block (codec weights)
    records  N*R frame records, frame-major / rate-minor:
             u8 frame type (0 I, 1 P), u8 rate index,
             u32 z length + bytes, u32 y length + bytes

The header is all a decoder needs; weight-block shapes follow from C and the
version-1 architecture constants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DimensionError

MAGIC = b"VRVC"
VERSION = 1


@dataclass
class FrameRecord:
    frame_type: int  # 0 = I, 1 = P
    rate_index: int
    z_payload: bytes
    y_payload: bytes

    @property
    def payload_bytes(self) -> int:
        return len(self.z_payload) + len(self.y_payload)


@dataclass
class GofBitstream:
    channels: int
    plane_dims: dict[str, tuple[int, int]]  # axis pair -> (H, W)
    grid_dims: tuple[int, int, int]
    bbox: np.ndarray  # (2,3)
    gof_length: int
    rate_table: list[tuple[float, float]]  # (lambda, a)
    phi_block: bytes
    entropy_block: bytes
    records: list[FrameRecord] = field(default_factory=list)

    def record(self, frame: int, rate_index: int) -> FrameRecord:
        r = self.records[frame * len(self.rate_table) + rate_index]
        if r.rate_index != rate_index:
            raise CorruptionError(f"record table out of order at frame {frame}", -1)
        return r

    @property
    def header_bytes(self) -> int:
        return len(self.to_bytes()) - sum(10 + r.payload_bytes for r in self.records)

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<BH", VERSION, self.channels)
        for name in ("xy", "yz", "xz"):
            out += struct.pack("<HH", *self.plane_dims[name])
        out += struct.pack("<HHH", *self.grid_dims)
        out += struct.pack("<6f", *np.asarray(self.bbox, dtype=np.float32).reshape(6))
        out += struct.pack("<BB", self.gof_length, len(self.rate_table))
        for lam, a in self.rate_table:
            out += struct.pack("<ff", lam, a)
        out += struct.pack("<I", len(self.phi_block)) + self.phi_block
        out += struct.pack("<I", len(self.entropy_block)) + self.entropy_block
        expected = self.gof_length * len(self.rate_table)
        if len(self.records) != expected:
            raise DimensionError(f"container needs {expected} records, has {len(self.records)}")
        for rec in self.records:
            out += struct.pack("<BB", rec.frame_type, rec.rate_index)
            out += struct.pack("<I", len(rec.z_payload)) + rec.z_payload
            out += struct.pack("<I", len(rec.y_payload)) + rec.y_payload
        return bytes(out)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "GofBitstream":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CorruptionError("bad magic", 0)
        version, channels = r.unpack("<BH")
        if version != VERSION:
            raise CorruptionError(f"unsupported version {version}", 4)
        plane_dims = {}
        for name in ("xy", "yz", "xz"):
            h, w = r.unpack("<HH")
            plane_dims[name] = (h, w)
        grid_dims = tuple(r.unpack("<HHH"))
        bbox = np.asarray(r.unpack("<6f"), dtype=np.float64).reshape(2, 3)
        gof_length, nrates = r.unpack("<BB")
        rate_table = [tuple(r.unpack("<ff")) for _ in range(nrates)]
        phi_block = r.take_block()
        entropy_block = r.take_block()
        records = []
        for _ in range(gof_length * nrates):
            ftype, ridx = r.unpack("<BB")
            if ridx >= nrates:
                raise CorruptionError(f"rate index {ridx} out of range", r.pos - 1)
            z = r.take_block()
            y = r.take_block()
            records.append(FrameRecord(ftype, ridx, z, y))
        return cls(channels, plane_dims, grid_dims, bbox, gof_length, rate_table, phi_block, entropy_block, records)

    @classmethod
    def read(cls, path) -> "GofBitstream":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"truncated stream: wanted {n} bytes", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def take_block(self) -> bytes:
        n = self.unpack("<I")
        if self.pos + n > len(self.data):
            raise CorruptionError(f"block length {n} overruns stream", self.pos - 4)
        return self.take(n)


def pack_f32_arrays(arrays: list[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def unpack_f32_arrays(block: bytes, shapes: list[tuple]) -> list[np.ndarray]:
    total = sum(int(np.prod(s)) for s in shapes)
    flat = np.frombuffer(block, dtype="<f4")
    if flat.size != total:
        raise CorruptionError(f"weight block holds {flat.size} floats, expected {total}", -1)
    out = []
    at = 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[at : at + n].reshape(s).astype(np.float64))
        at += n
    return out
