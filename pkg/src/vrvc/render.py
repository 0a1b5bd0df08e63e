"""Differentiable deferred volume renderer.

Rays march through the field's bounding box at a fixed step; samples whose
activated density falls below the skip threshold are dropped before any
feature lookup.  Features (not colors) accumulate along each ray, and the
shared color MLP decodes once per ray from the accumulated feature plus the
positionally encoded view direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, Tensor, _make, as_tensor, no_grad
from .errors import DimensionError
from .field import AXIS_PAIRS, FrameField, project

DENSITY_BIAS = -2.0
SKIP_THRESHOLD = 1e-4
N_FREQ_BANDS = 4
DIR_ENCODING_DIM = 3 + 3 * 2 * N_FREQ_BANDS  # 27


@dataclass
class Camera:
    """Pinhole camera; R maps camera coordinates to world, eye is the center."""

    focal: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3), world-from-camera, columns [x_cam, y_cam, z_cam]
    eye: np.ndarray  # (3,)
    width: int
    height: int

    def validate(self):
        if self.focal <= 0:
            raise DimensionError(f"focal must be positive, got {self.focal}")
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > 1e-9:
            raise DimensionError(f"rotation not orthonormal (max deviation {err:.2e})")
        return self

    def to_json(self) -> dict:
        return {
            "focal": self.focal,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "eye": self.eye.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            float(d["focal"]),
            float(d["cx"]),
            float(d["cy"]),
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["eye"], dtype=np.float64),
            int(d["width"]),
            int(d["height"]),
        ).validate()


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation with +z toward the target and y down in image space."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    pixel: tuple[int, int]


@dataclass
class SampleSet:
    """Retained samples along one ray (skipped points are already dropped)."""

    positions: np.ndarray  # (n,3)
    deltas: np.ndarray  # (n,)
    raw: np.ndarray  # (n,)
    sigma: np.ndarray  # (n,)
    features: np.ndarray  # (n,3C)
    transmittances: np.ndarray  # (n,), exclusive: T_1 = 1
    count: int


def generate_rays(camera: Camera, pixels) -> list[Ray]:
    """Rays through pixel centers of `pixels` (iterable of (u, v))."""
    pixels = np.atleast_2d(np.asarray(pixels))
    if np.any(pixels[:, 0] >= camera.width) or np.any(pixels[:, 1] >= camera.height) or np.any(pixels < 0):
        raise DimensionError("pixel indices outside image bounds")
    dirs = _pixel_directions(camera, pixels[:, 0].astype(np.float64), pixels[:, 1].astype(np.float64))
    return [Ray(camera.eye.copy(), d, (int(u), int(v))) for d, (u, v) in zip(dirs, pixels)]


def _pixel_directions(camera: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d_cam = np.stack([(u - camera.cx) / camera.focal, (v - camera.cy) / camera.focal, np.ones_like(u)], axis=1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def ray_bbox_span(origins: np.ndarray, dirs: np.ndarray, bbox: np.ndarray):
    """Entry/exit distances of rays against the box; t1 <= t0 means a miss."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.inf)
        ta = (bbox[0] - origins) * inv
        tb = (bbox[1] - origins) * inv
    # parallel rays: inside the slab -> (-inf, inf), outside -> empty
    parallel = np.abs(dirs) <= 1e-12
    inside = (origins >= bbox[0]) & (origins <= bbox[1])
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(lo.max(axis=1), 0.0)
    t1 = hi.min(axis=1)
    return t0, t1


def sample_count(t0: float, t1: float, step: float) -> int:
    span = t1 - t0
    if span <= 0:
        return 0
    return max(0, int(np.floor(span / step + 0.5)))


def dir_encoding(dirs: np.ndarray) -> np.ndarray:
    """[d; sin(2^j pi d); cos(2^j pi d)] for j = 0..3 (27 dims)."""
    dirs = np.atleast_2d(dirs)
    parts = [dirs]
    for j in range(N_FREQ_BANDS):
        arg = (2.0**j) * np.pi * dirs
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


def scatter_rows(src: Tensor, index: np.ndarray, total: int) -> Tensor:
    """Place rows of src at distinct positions of a zero (total, ...) tensor."""
    src = as_tensor(src)
    data = np.zeros((total,) + src.data.shape[1:], dtype=src.data.dtype)
    data[index] = src.data

    def backward(g):
        src._accum(g[index], owned=True)

    return _make(data, (src,), backward)


def segment_sum(src: Tensor, seg_ids: np.ndarray, nseg: int) -> Tensor:
    """Sum rows of src (M, C) into (nseg, C) buckets; seg_ids must be sorted.

    Contiguous segments let the forward ride on np.add.reduceat.
    """
    src = as_tensor(src)
    counts = np.bincount(seg_ids, minlength=nseg)
    nonempty = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts)])[:-1][nonempty]
    out = np.zeros((nseg,) + src.data.shape[1:], dtype=src.data.dtype)
    if nonempty.size:
        out[nonempty] = np.add.reduceat(src.data, starts, axis=0)

    def backward(g):
        src._accum(np.ascontiguousarray(g[seg_ids]), owned=True)

    return _make(out, (src,), backward)


def gather_rows(src: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows of a flat tensor; duplicates in index are allowed."""
    src = as_tensor(src)

    def backward(g):
        full = np.zeros_like(src.data)
        np.add.at(full, index, g)
        src._accum(full, owned=True)

    return _make(src.data[index], (src,), backward)


class RenderSettings:
    def __init__(
        self,
        step: float,
        skip_threshold: float = SKIP_THRESHOLD,
        density_bias: float = DENSITY_BIAS,
        background=(1.0, 1.0, 1.0),
    ):
        if step <= 0:
            raise DimensionError(f"step must be positive, got {step}")
        self.step = step
        self.skip_threshold = skip_threshold
        self.density_bias = density_bias
        self.background = np.asarray(background, dtype=np.float64)

    @staticmethod
    def for_bbox(bbox, divisor: int = 256, **kw) -> "RenderSettings":
        bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        diag = float(np.linalg.norm(bbox[1] - bbox[0]))
        return RenderSettings(step=diag / divisor, **kw)


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def render_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    planes: dict[str, Tensor],
    grid: Tensor,
    bbox: np.ndarray,
    phi: Mlp,
    settings: RenderSettings,
):
    """Batched differentiable render: returns (rgb (B,3), opacity (B,)) tensors.

    Ray geometry and the empty-space skip decision are computed outside the
    tape; gradients flow through densities, features and the decoder.
    """
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    nrays = origins.shape[0]
    t0, t1 = ray_bbox_span(origins, dirs, bbox)
    counts = np.maximum(0, np.floor(np.maximum(t1 - t0, 0.0) / settings.step + 0.5).astype(np.int64))
    total = int(counts.sum())
    dt = grid.data.dtype

    if total == 0:
        zero_feat = Tensor(np.zeros((nrays, 3 * planes["xy"].data.shape[0]), dtype=dt))
        opacity = Tensor(np.zeros(nrays, dtype=dt))
        rgb = _decode_batch(zero_feat, dirs, phi)
        return _composite(rgb, opacity, settings.background), opacity

    ray_id = np.repeat(np.arange(nrays), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k_in_ray = np.arange(total) - offsets[ray_id]
    ts = t0[ray_id] + (k_in_ray + 0.5) * settings.step
    pts = origins[ray_id] + dirs[ray_id] * ts[:, None]
    norm = np.clip((pts - bbox[0]) / (bbox[1] - bbox[0]), 0.0, 1.0)

    # skip decision from raw densities, outside the tape
    from . import kernels

    raw_np = kernels.trilinear_fwd(grid.data, np.ascontiguousarray(norm))
    sigma_np = _softplus_np(raw_np + dt.type(settings.density_bias))
    keep = sigma_np >= settings.skip_threshold
    kept = np.flatnonzero(keep)

    if kept.size == 0:
        zero_feat = Tensor(np.zeros((nrays, 3 * planes["xy"].data.shape[0]), dtype=dt))
        opacity = Tensor(np.zeros(nrays, dtype=dt))
        rgb = _decode_batch(zero_feat, dirs, phi)
        return _composite(rgb, opacity, settings.background), opacity

    kept_ray = ray_id[kept]
    kept_norm = np.ascontiguousarray(norm[kept])
    kept_pts = pts[kept]

    # rectangle layout of the scalar density path (cumulative transmittance
    # needs per-ray prefix sums); features stay flat per retained sample
    r_counts = np.bincount(kept_ray, minlength=nrays)
    kmax = int(r_counts.max())
    slot = np.arange(kept.size) - np.concatenate([[0], np.cumsum(r_counts)[:-1]])[kept_ray]
    fill = kept_ray * kmax + slot

    raw_t = _trilinear_gather(grid, kept_norm)
    sigma_t = ad.softplus(ad.add(raw_t, float(settings.density_bias)))
    feat_t = _query_planes_normed(planes, kept_norm)

    sd_flat = ad.mul(sigma_t, dt.type(settings.step))
    sd_rect = ad.reshape(scatter_rows(ad.reshape(sd_flat, (-1, 1)), fill, nrays * kmax), (nrays, kmax))
    w_rect = _composite_weights_from_sd(sd_rect)
    w_flat = gather_rows(ad.reshape(w_rect, (nrays * kmax, 1)), fill)
    f_acc = segment_sum(ad.mul(w_flat, feat_t), kept_ray, nrays)
    opacity = ad.tsum(w_rect, axis=1)
    rgb = _decode_batch(f_acc, dirs, phi)
    return _composite(rgb, opacity, settings.background), opacity


def _composite_weights_from_sd(sd: Tensor) -> Tensor:
    """Front-to-back weights T_k (1 - exp(-sigma_k delta_k)) from the optical
    depth rectangle; zero padding contributes zero weight."""
    cums = ad.cumsum(sd, axis=1)
    excl = ad.add(cums, ad.mul(sd, -1.0))
    trans = ad.exp(ad.mul(excl, -1.0))
    alpha = ad.add(1.0, ad.mul(ad.exp(ad.mul(sd, -1.0)), -1.0))
    return ad.mul(trans, alpha)


def _trilinear_gather(grid: Tensor, norm_pts: np.ndarray) -> Tensor:
    from . import kernels

    def backward(g):
        grid._accum(kernels.trilinear_bwd_grid(grid.data.shape, norm_pts, np.ascontiguousarray(g)), owned=True)

    return _make(kernels.trilinear_fwd(grid.data, norm_pts), (grid,), backward)


def _query_planes_normed(planes: dict[str, Tensor], norm: np.ndarray) -> Tensor:
    """Tri-plane feature concat from already normalized [0,1]^3 coordinates."""
    from .field import _PAIR_INDICES, bilinear_sample

    parts = []
    for name in AXIS_PAIRS:
        i, j = _PAIR_INDICES[name]
        parts.append(bilinear_sample(planes[name], norm[:, (i, j)]))
    return ad.concat(parts, axis=1)


def _decode_batch(f_acc: Tensor, dirs: np.ndarray, phi: Mlp) -> Tensor:
    enc = dir_encoding(dirs).astype(f_acc.data.dtype)
    din = phi.layers[0][0].data.shape[0]
    if f_acc.data.shape[1] + enc.shape[1] != din:
        raise DimensionError(f"decoder expects {din} inputs, got {f_acc.data.shape[1]} + {enc.shape[1]}")
    return ad.sigmoid(phi(ad.concat([f_acc, Tensor(enc)], axis=1)))


def _composite(rgb: Tensor, opacity: Tensor, background) -> Tensor:
    bg = np.asarray(background, dtype=rgb.data.dtype)
    op = ad.reshape(opacity, (-1, 1))
    return ad.add(ad.mul(rgb, op), ad.mul(ad.add(1.0, ad.mul(op, -1.0)), bg))


# -- spec-level single-ray operations -----------------------------------------


def march(ray: Ray, field: FrameField, settings: RenderSettings) -> SampleSet:
    """Fixed-step march of one ray through the field's bbox with skipping."""
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    t0, t1 = ray_bbox_span(o, d, field.bbox)
    n = sample_count(float(t0[0]), float(t1[0]), settings.step)
    dt = field.grid.dtype
    empty = SampleSet(
        np.zeros((0, 3)), np.zeros(0, dtype=dt), np.zeros(0, dtype=dt), np.zeros(0, dtype=dt),
        np.zeros((0, 3 * field.channels), dtype=dt), np.zeros(0, dtype=dt), 0,
    )
    if n == 0:
        return empty
    ts = t0[0] + (np.arange(n) + 0.5) * settings.step
    pts = ray.origin[None, :] + ray.direction[None, :] * ts[:, None]
    bbox = field.bbox
    norm = np.ascontiguousarray(np.clip((pts - bbox[0]) / (bbox[1] - bbox[0]), 0.0, 1.0))
    from . import kernels

    raw = kernels.trilinear_fwd(field.grid, norm)
    sigma = _softplus_np(raw + dt.type(settings.density_bias))
    keep = sigma >= settings.skip_threshold
    if not keep.any():
        return empty
    pts, raw, sigma = pts[keep], raw[keep], sigma[keep]
    with no_grad():
        from .field import query_feature

        feats = query_feature(field, pts).data
    deltas = np.full(pts.shape[0], dt.type(settings.step), dtype=dt)
    sd = sigma * deltas
    trans = np.exp(-(np.cumsum(sd) - sd))
    return SampleSet(pts, deltas, raw, sigma, feats.astype(dt), trans, int(pts.shape[0]))


def accumulate(samples: SampleSet):
    """Eq.-9 style accumulation: returns (accumulated feature, opacity)."""
    if samples.count == 0:
        return np.zeros(samples.features.shape[1] if samples.features.ndim == 2 else 0), 0.0
    sd = samples.sigma * samples.deltas
    trans = np.exp(-(np.cumsum(sd) - sd))
    w = trans * (1.0 - np.exp(-sd))
    return (w[:, None] * samples.features).sum(axis=0), float(w.sum())


def decode_color(f_acc: np.ndarray, direction: np.ndarray, phi: Mlp) -> np.ndarray:
    """Single decode of the accumulated feature: sigmoid-bounded RGB."""
    with no_grad():
        out = _decode_batch(Tensor(np.atleast_2d(f_acc)), np.atleast_2d(direction), phi)
    return out.data[0]


def render_image(field: FrameField, phi: Mlp, camera: Camera, settings: RenderSettings, chunk: int = 2048):
    """Full-frame render; returns (H,W,3) image and (H,W) opacity, deterministic."""
    camera.validate()
    h, w = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    dirs = _pixel_directions(camera, pix[:, 0].astype(np.float64), pix[:, 1].astype(np.float64))
    origins = np.broadcast_to(camera.eye, dirs.shape)
    planes_t = {name: Tensor(field.planes[name]) for name in AXIS_PAIRS}
    grid_t = Tensor(field.grid)
    img = np.zeros((h * w, 3), dtype=np.float64)
    opac = np.zeros(h * w, dtype=np.float64)
    with no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            rgb, op = render_rays(origins[lo:hi], dirs[lo:hi], planes_t, grid_t, field.bbox, phi, settings)
            img[lo:hi] = rgb.data
            opac[lo:hi] = op.data
    return img.reshape(h, w, 3), opac.reshape(h, w)
