"""Analytic dynamic scenes: parametric primitives, camera rigs, exact ray-traced
ground truth for training and held-out evaluation.

Shading is first-hit only: albedo * (0.5 + 0.5 <n, l>) plus a view-dependent
tint term tint * <view, n>^2, composited over a flat background.  Everything
is a pure function of (scene, camera, frame), so outputs are pixel-exact
across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .render import Camera, look_at

LIGHT_DIR = np.array([0.35, 0.85, -0.4])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)


@dataclass
class Trajectory:
    """Center position as a function of the frame index."""

    kind: str  # static | orbit | linear
    center: tuple = (0.0, 0.0, 0.0)
    orbit_radius: float = 0.0
    period: int = 8
    phase: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)

    def at(self, t: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "static":
            return c
        if self.kind == "orbit":
            ang = 2 * np.pi * t / self.period + self.phase
            return c + self.orbit_radius * np.array([np.cos(ang), 0.0, np.sin(ang)])
        if self.kind == "linear":
            return c + t * np.asarray(self.velocity, dtype=np.float64)
        raise ConfigError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class Primitive:
    kind: str  # sphere | box
    trajectory: Trajectory
    radius: float = 0.3  # sphere radius or box half-extent scale
    half_extents: tuple = (0.3, 0.3, 0.3)
    albedo: tuple = (0.8, 0.3, 0.2)
    tint: float = 0.0


@dataclass
class SceneSpec:
    name: str
    primitives: list[Primitive]
    background: tuple = (1.0, 1.0, 1.0)
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    frame_count: int = 5
    camera_count: int = 10
    rig_radius: float = 3.2
    elevations: tuple = (18.0,)
    test_cameras: tuple = (3, 8)
    width: int = 64
    height: int = 64
    focal: float = 70.0

    def validate(self) -> "SceneSpec":
        if self.camera_count < 2 or not self.test_cameras:
            raise ConfigError("need at least 2 cameras with at least 1 held out")
        if max(self.test_cameras) >= self.camera_count * len(self.elevations):
            raise ConfigError("test camera index out of range")
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        for p in self.primitives:
            for t in range(self.frame_count):
                c = p.trajectory.at(t)
                r = p.radius if p.kind == "sphere" else max(p.half_extents)
                if np.any(c - r < lo) or np.any(c + r > hi):
                    raise ConfigError(f"primitive leaves bbox at frame {t}")
        return self

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "background": list(self.background),
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
            "frame_count": self.frame_count,
            "camera_count": self.camera_count,
            "rig_radius": self.rig_radius,
            "elevations": list(self.elevations),
            "test_cameras": list(self.test_cameras),
            "width": self.width,
            "height": self.height,
            "focal": self.focal,
            "primitives": [
                {
                    "kind": p.kind,
                    "radius": p.radius,
                    "half_extents": list(p.half_extents),
                    "albedo": list(p.albedo),
                    "tint": p.tint,
                    "trajectory": {
                        "kind": p.trajectory.kind,
                        "center": list(p.trajectory.center),
                        "orbit_radius": p.trajectory.orbit_radius,
                        "period": p.trajectory.period,
                        "phase": p.trajectory.phase,
                        "velocity": list(p.trajectory.velocity),
                    },
                }
                for p in self.primitives
            ],
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        prims = []
        for p in d["primitives"]:
            tr = p["trajectory"]
            prims.append(
                Primitive(
                    p["kind"],
                    Trajectory(
                        tr["kind"],
                        tuple(tr["center"]),
                        tr["orbit_radius"],
                        tr["period"],
                        tr["phase"],
                        tuple(tr["velocity"]),
                    ),
                    p["radius"],
                    tuple(p["half_extents"]),
                    tuple(p["albedo"]),
                    p["tint"],
                )
            )
        return cls(
            d["name"],
            prims,
            tuple(d["background"]),
            (tuple(d["bbox"][0]), tuple(d["bbox"][1])),
            d["frame_count"],
            d["camera_count"],
            d["rig_radius"],
            tuple(d["elevations"]),
            tuple(d["test_cameras"]),
            d["width"],
            d["height"],
            d["focal"],
        ).validate()


def make_rig(
    count: int,
    radius: float,
    elevations,
    target=(0.0, 0.0, 0.0),
    width: int = 64,
    height: int = 64,
    focal: float = 70.0,
) -> list[Camera]:
    """`count` cameras per elevation ring, evenly spaced in azimuth, aimed at target."""
    if count < 2:
        raise ConfigError("a rig needs at least 2 cameras")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for elev_deg in np.atleast_1d(elevations):
        phi = np.deg2rad(float(elev_deg))
        for k in range(count):
            theta = 2 * np.pi * k / count
            eye = target + radius * np.array([np.cos(phi) * np.cos(theta), np.sin(phi), np.cos(phi) * np.sin(theta)])
            rot = look_at(eye, target)
            cams.append(Camera(focal, (width - 1) / 2.0, (height - 1) / 2.0, rot, eye, width, height).validate())
    return cams


def scene_cameras(spec: SceneSpec) -> list[Camera]:
    center = 0.5 * (np.asarray(spec.bbox[0]) + np.asarray(spec.bbox[1]))
    return make_rig(spec.camera_count, spec.rig_radius, spec.elevations, center, spec.width, spec.height, spec.focal)


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.sum(oc * dirs, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(t > 1e-9, t, -b + sq)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(origins, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, np.inf)
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    parallel = np.abs(dirs) <= 1e-12
    inside = (origins >= lo) & (origins <= hi)
    tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    thi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = tlo.max(axis=1)
    t1 = thi.min(axis=1)
    t = np.where((t1 >= t0) & (t1 > 1e-9), np.where(t0 > 1e-9, t0, t1), np.inf)
    return t


def _box_normal(p, center, half):
    rel = (p - center) / half
    n = np.zeros_like(rel)
    idx = np.argmax(np.abs(rel), axis=1)
    rows = np.arange(rel.shape[0])
    n[rows, idx] = np.sign(rel[rows, idx])
    return n


def ray_trace_gt(spec: SceneSpec, camera: Camera, t: int) -> np.ndarray:
    """Exact first-hit shading of frame t from one camera; (H,W,3) floats in [0,1]."""
    if t >= spec.frame_count:
        raise ConfigError(f"frame {t} outside scene length {spec.frame_count}")
    from .render import _pixel_directions

    h, w = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs = _pixel_directions(camera, uu.reshape(-1), vv.reshape(-1))
    origins = np.broadcast_to(camera.eye, dirs.shape)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, dtype=np.int64)
    centers = [p.trajectory.at(t) for p in spec.primitives]
    for i, prim in enumerate(spec.primitives):
        if prim.kind == "sphere":
            ts = _intersect_sphere(origins, dirs, centers[i], prim.radius)
        elif prim.kind == "box":
            ts = _intersect_box(origins, dirs, centers[i], np.asarray(prim.half_extents))
        else:
            raise ConfigError(f"unknown primitive kind {prim.kind!r}")
        closer = ts < best_t
        best_t = np.where(closer, ts, best_t)
        best_idx = np.where(closer, i, best_idx)

    img = np.tile(np.asarray(spec.background, dtype=np.float64), (n, 1))
    for i, prim in enumerate(spec.primitives):
        mask = best_idx == i
        if not mask.any():
            continue
        pts = origins[mask] + dirs[mask] * best_t[mask][:, None]
        if prim.kind == "sphere":
            normals = (pts - centers[i]) / prim.radius
        else:
            normals = _box_normal(pts, centers[i], np.asarray(prim.half_extents))
        lambert = 0.5 + 0.5 * (normals @ LIGHT_DIR)
        view_sq = np.sum(dirs[mask] * normals, axis=1) ** 2
        color = np.asarray(prim.albedo) * lambert[:, None] + prim.tint * view_sq[:, None]
        img[mask] = color
    return np.clip(img, 0.0, 1.0).reshape(h, w, 3)


def scene_presets() -> dict[str, SceneSpec]:
    """Named fixtures: static (residual-sparsity), orbiting, and two-body scenes."""
    static = SceneSpec(
        "static-sphere",
        [Primitive("sphere", Trajectory("static", (0.0, 0.0, 0.0)), radius=0.45, albedo=(0.85, 0.25, 0.2), tint=0.15)],
        frame_count=3,
    )
    rotating = SceneSpec(
        "rotating-sphere",
        [
            Primitive(
                "sphere",
                Trajectory("orbit", (0.0, 0.0, 0.0), orbit_radius=0.35, period=10),
                radius=0.38,
                albedo=(0.2, 0.45, 0.85),
                tint=0.2,
            )
        ],
        frame_count=5,
    )
    two_body = SceneSpec(
        "two-body",
        [
            Primitive(
                "sphere",
                Trajectory("orbit", (0.0, 0.1, 0.0), orbit_radius=0.42, period=12, phase=0.5),
                radius=0.3,
                albedo=(0.9, 0.7, 0.2),
                tint=0.25,
            ),
            Primitive(
                "box",
                Trajectory("static", (0.0, -0.25, 0.0)),
                half_extents=(0.34, 0.18, 0.34),
                albedo=(0.25, 0.6, 0.35),
                tint=0.0,
            ),
        ],
        frame_count=10,
    )
    return {s.name: s.validate() for s in (static, rotating, two_body)}


def save_scene(spec: SceneSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_json(json.load(f))
