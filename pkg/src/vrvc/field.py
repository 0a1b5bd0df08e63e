"""Radiance-field data model: tri-plane feature stacks plus a density grid.

A frame's field holds three orthogonal feature planes (xy, yz, xz) and a raw
density grid; a residual field has identical shapes and is interpreted as a
delta against the previous reconstruction.  Sampling is bilinear on planes
and trilinear on the grid, node-aligned, differentiable w.r.t. stored values
(and sample coordinates where requested).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import config, kernels
from .autodiff import Tensor, _make, as_tensor, concat
from .errors import DimensionError, NonFiniteError

AXIS_PAIRS = ("xy", "yz", "xz")
_PAIR_INDICES = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}


@dataclass
class FrameField:
    """One frame's radiance field: planes (C,H,W) per axis pair + raw density grid."""

    planes: dict[str, np.ndarray]
    grid: np.ndarray
    bbox: np.ndarray  # (2,3): lower, upper corners
    channels: int

    def validate(self):
        cs = {self.planes[p].shape[0] for p in AXIS_PAIRS}
        if cs != {self.channels}:
            raise DimensionError(f"plane channel counts {cs} != C={self.channels}")
        for name in AXIS_PAIRS:
            if not np.all(np.isfinite(self.planes[name])):
                raise NonFiniteError(f"plane {name} has non-finite values")
        if not np.all(np.isfinite(self.grid)):
            raise NonFiniteError("density grid has non-finite values")
        return self

    def copy(self) -> "FrameField":
        return type(self)({k: v.copy() for k, v in self.planes.items()}, self.grid.copy(), self.bbox.copy(), self.channels)

    def astype(self, dtype) -> "FrameField":
        return type(self)(
            {k: v.astype(dtype) for k, v in self.planes.items()}, self.grid.astype(dtype), self.bbox.copy(), self.channels
        )

    def components(self) -> list[tuple[str, np.ndarray]]:
        """Fixed component order: xy, yz, xz planes, then the grid."""
        return [(name, self.planes[name]) for name in AXIS_PAIRS] + [("grid", self.grid)]

    @classmethod
    def zeros(cls, channels: int, plane_res: int, grid_res: int, bbox, dtype=None) -> "FrameField":
        dt = dtype or config.dtype()
        planes = {name: np.zeros((channels, plane_res, plane_res), dtype=dt) for name in AXIS_PAIRS}
        grid = np.zeros((grid_res, grid_res, grid_res), dtype=dt)
        return cls(planes, grid, np.asarray(bbox, dtype=np.float64).reshape(2, 3), channels)


class ResidualField(FrameField):
    """Per-frame delta over the previous reconstruction; same layout as FrameField."""


def project(x, axis_pair: str, bbox) -> np.ndarray:
    """Normalize a world point onto the named plane: (u, v) in [0,1]^2.

    Accepts a single point (3,) or a batch (N,3); coordinates are clamped to
    the box.
    """
    x = np.asarray(x, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    i, j = _PAIR_INDICES[axis_pair]
    span = bbox[1] - bbox[0]
    norm = np.clip((x - bbox[0]) / span, 0.0, 1.0)
    return norm[..., (i, j)]


def bilinear_sample(plane, uv) -> Tensor:
    """Sample a (C,H,W) plane at uv in [0,1]^2 (single point or (N,2) batch).

    Differentiable w.r.t. plane values and uv.
    """
    plane = as_tensor(plane)
    single = not isinstance(uv, Tensor) and np.ndim(uv) == 1
    uv_t = uv if isinstance(uv, Tensor) else Tensor(np.atleast_2d(np.asarray(uv, dtype=np.float64)), dtype=np.float64)
    u = np.ascontiguousarray(uv_t.data[:, 0], dtype=np.float64)
    v = np.ascontiguousarray(uv_t.data[:, 1], dtype=np.float64)

    def backward(g):
        if plane.requires_grad:
            plane._accum(kernels.bilinear_bwd_plane(plane.data.shape, u, v, np.ascontiguousarray(g)), owned=True)
        if uv_t.requires_grad:
            gu, gv = kernels.bilinear_bwd_uv(plane.data, u, v, g)
            uv_t._accum(np.stack([gu, gv], axis=1).astype(uv_t.data.dtype), owned=True)

    out = _make(kernels.bilinear_fwd(plane.data, u, v), (plane, uv_t), backward)
    return out[0] if single else out


def trilinear_sample(grid, x, bbox) -> Tensor:
    """Sample a (Dx,Dy,Dz) grid at world point(s) x; trilinear, node aligned."""
    grid = as_tensor(grid)
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = np.ndim(x) == 1
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    p = np.clip((pts - bbox[0]) / (bbox[1] - bbox[0]), 0.0, 1.0)
    p = np.ascontiguousarray(p)

    def backward(g):
        grid._accum(kernels.trilinear_bwd_grid(grid.data.shape, p, np.ascontiguousarray(g)), owned=True)

    out = _make(kernels.trilinear_fwd(grid.data, p), (grid,), backward)
    return out[0] if single else out


def query_feature(field: FrameField, x, plane_tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Concatenated tri-plane feature at world point(s) x: [xy; yz; xz], length 3C.

    `plane_tensors` substitutes differentiable plane tensors (training path);
    by default the field's arrays are sampled as constants.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = np.ndim(x) == 1
    parts = []
    for name in AXIS_PAIRS:
        plane = plane_tensors[name] if plane_tensors is not None else field.planes[name]
        uv = project(pts, name, field.bbox)
        parts.append(bilinear_sample(plane, uv))
    out = concat(parts, axis=1)
    return out[0] if single else out


def compensate(prev: FrameField, residual: ResidualField) -> FrameField:
    """Reconstruct a frame as previous reconstruction plus decoded residual."""
    for name in AXIS_PAIRS:
        if prev.planes[name].shape != residual.planes[name].shape:
            raise DimensionError(f"plane {name}: {prev.planes[name].shape} vs {residual.planes[name].shape}")
    if prev.grid.shape != residual.grid.shape:
        raise DimensionError(f"grid: {prev.grid.shape} vs {residual.grid.shape}")
    planes = {name: prev.planes[name] + residual.planes[name] for name in AXIS_PAIRS}
    return FrameField(planes, prev.grid + residual.grid, prev.bbox.copy(), prev.channels)


def _down2_2d(a: np.ndarray) -> np.ndarray:
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise DimensionError(f"plane extents {h}x{w} not divisible by 2")
    return a.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _down2_3d(a: np.ndarray) -> np.ndarray:
    dx, dy, dz = a.shape
    if dx % 2 or dy % 2 or dz % 2:
        raise DimensionError(f"grid extents {a.shape} not divisible by 2")
    return a.reshape(dx // 2, 2, dy // 2, 2, dz // 2, 2).mean(axis=(1, 3, 5))


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis with node alignment: even outputs copy the source."""
    n = a.shape[axis]
    a = np.moveaxis(a, axis, 0)
    out_shape = (2 * n,) + a.shape[1:]
    out = np.empty(out_shape, dtype=a.dtype)
    out[0::2] = a
    out[1:-1:2] = 0.5 * (a[:-1] + a[1:])
    out[-1] = a[-1]
    return np.moveaxis(out, 0, axis)


def resample_field(f: FrameField, scale: str) -> FrameField:
    """Resolution change for progressive training: 'down2' (2x average pooling)
    or 'up2' (linear, node aligned on even indices)."""
    if scale == "down2":
        planes = {name: _down2_2d(f.planes[name]) for name in AXIS_PAIRS}
        grid = _down2_3d(f.grid)
    elif scale == "up2":
        planes = {}
        for name in AXIS_PAIRS:
            p = _up2_axis(f.planes[name], 1)
            planes[name] = _up2_axis(p, 2)
        grid = _up2_axis(_up2_axis(_up2_axis(f.grid, 0), 1), 2)
    else:
        raise ValueError(f"scale must be 'down2' or 'up2', got {scale!r}")
    out_cls = type(f)
    return out_cls(planes, grid, f.bbox.copy(), f.channels)


@dataclass
class GroupOfFeatures:
    """A GoF: shared color decoder weights plus the ordered frame entries."""

    gof_length: int
    decoder_weights: object  # Mlp; fixed after the first frame trains
    frames: list = dc_field(default_factory=list)  # residual entries; index 0 is the I-entry
    reference_recons: list = dc_field(default_factory=list)


class DecodedBuffer:
    """Most recent reconstructed FrameField per active rate point."""

    def __init__(self, fields: dict[int, FrameField], frame_index: int = 0):
        shapes = {tuple(f.grid.shape) for f in fields.values()}
        if len(shapes) > 1:
            raise DimensionError(f"buffer entries disagree on shapes: {shapes}")
        self.fields = fields
        self.frame_index = frame_index

    def update(self, fields: dict[int, FrameField], frame_index: int):
        self.fields = fields
        self.frame_index = frame_index

    def get(self, rate_index: int) -> FrameField:
        return self.fields[rate_index]
