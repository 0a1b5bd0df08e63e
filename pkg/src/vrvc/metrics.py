"""Quality and compression metrics: PSNR, SSIM, BD-rate, RD sweeps."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionError, EvaluationError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class RdPoint:
    rate_kb: float  # KB per frame
    psnr_db: float
    ssim: float
    rate_index: int
    split: str  # train | test


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DimensionError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(peak * peak / mse)


def psnr_capped(a, b, peak: float = 1.0) -> float:
    return min(psnr(a, b, peak), PSNR_CAP_DB)


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), per-channel average."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = convolve2d(x, w, mode="valid")
        my = convolve2d(y, w, mode="valid")
        mxx = convolve2d(x * x, w, mode="valid")
        myy = convolve2d(y * y, w, mode="valid")
        mxy = convolve2d(x * y, w, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def bd_rate(reference: list[tuple[float, float]], test: list[tuple[float, float]]) -> float:
    """Bjontegaard delta bitrate of `test` against `reference`, in percent.

    Points are (rate, quality_db); each curve needs >= 4 points and the
    quality ranges must overlap.  Cubic fit of log10(rate) over quality,
    integrated over the common interval; negative means the test curve
    spends less rate at equal quality.
    """
    if len(reference) < 4 or len(test) < 4:
        raise EvaluationError("BD-rate needs at least 4 points per curve")
    r_rate, r_q = np.array([p[0] for p in reference]), np.array([p[1] for p in reference])
    t_rate, t_q = np.array([p[0] for p in test]), np.array([p[1] for p in test])
    if np.any(r_rate <= 0) or np.any(t_rate <= 0):
        raise EvaluationError("rates must be positive")
    lo = max(r_q.min(), t_q.min())
    hi = min(r_q.max(), t_q.max())
    if hi <= lo:
        raise EvaluationError("quality ranges do not overlap")
    p_ref = np.polyfit(r_q, np.log10(r_rate), 3)
    p_test = np.polyfit(t_q, np.log10(t_rate), 3)
    int_ref = np.polyint(p_ref)
    int_test = np.polyint(p_test)
    avg = ((np.polyval(int_test, hi) - np.polyval(int_test, lo)) - (np.polyval(int_ref, hi) - np.polyval(int_ref, lo))) / (
        hi - lo
    )
    return float((10.0**avg - 1.0) * 100.0)


def rd_sweep(bitstreams: list, spec, images: dict[int, list[np.ndarray]] | None = None) -> tuple[list[RdPoint], float]:
    """Decode every rate point of every frame, render both view splits, and
    aggregate mean PSNR/SSIM and mean payload KB per frame per rate index.

    kb_per_frame counts payload bytes exactly (payload/1024); the container
    header is amortized per GoF and returned separately as KB/frame.
    Returns (points, header_kb_per_frame).
    """
    from .codec import decode_fields, decode_gof_model
    from .render import RenderSettings, render_image
    from .scenes import ray_trace_gt, scene_cameras

    cameras = scene_cameras(spec)
    test_ids = set(spec.test_cameras)
    nrates = len(bitstreams[0].rate_table)
    per_rate_bytes = {i: [] for i in range(nrates)}
    per_rate_quality = {i: {"train": [], "test": []} for i in range(nrates)}
    header_bytes = 0.0
    total_frames = 0
    frame_base = 0
    for bs in bitstreams:
        header_bytes += bs.header_bytes
        total_frames += bs.gof_length
        model, phi = decode_gof_model(bs)
        settings = RenderSettings.for_bbox(bs.bbox, background=spec.background)
        for i in range(nrates):
            fields = decode_fields(bs, i, model=model)
            for t, f in enumerate(fields):
                per_rate_bytes[i].append(bs.record(t, i).payload_bytes)
                gt_frame = frame_base + t
                for ci, cam in enumerate(cameras):
                    gt = images[gt_frame][ci] if images is not None else ray_trace_gt(spec, cam, gt_frame)
                    img, _ = render_image(f, phi, cam, settings)
                    split = "test" if ci in test_ids else "train"
                    per_rate_quality[i][split].append((psnr_capped(img, gt), ssim(img, gt)))
        frame_base += bs.gof_length
    points = []
    for i in range(nrates):
        kb = float(np.mean(per_rate_bytes[i])) / 1024.0
        for split in ("train", "test"):
            vals = per_rate_quality[i][split]
            if not vals:
                continue
            ps = float(np.mean([v[0] for v in vals]))
            ss = float(np.mean([v[1] for v in vals]))
            points.append(RdPoint(kb, ps, ss, i, split))
    return points, header_bytes / max(total_frames, 1) / 1024.0


CSV_HEADER = "scene,split,rate_index,lambda,kb_per_frame,psnr_db,ssim"


def rd_csv(scene_name: str, points: list[RdPoint], lambdas: list[float]) -> str:
    """CSV rows per (rate index, split), matching the documented schema."""
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for p in sorted(points, key=lambda p: (p.rate_index, p.split)):
        out.write(
            f"{scene_name},{p.split},{p.rate_index},{lambdas[p.rate_index]:.6g},"
            f"{p.rate_kb:.6f},{p.psnr_db:.4f},{p.ssim:.6f}\n"
        )
    return out.getvalue()


def rd_dat(points: list[RdPoint], split: str) -> str:
    """gnuplot-ready two-column (kb, psnr) block for one split, sorted by rate."""
    rows = sorted((p for p in points if p.split == split), key=lambda p: p.rate_kb)
    return "".join(f"{p.rate_kb:.6f} {p.psnr_db:.4f}\n" for p in rows)
