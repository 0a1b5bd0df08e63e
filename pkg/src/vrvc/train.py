"""Per-group progressive training and bitstream emission.

Each group of frames trains frame by frame: a coarse half-resolution stage
fits the residual against the downsampled previous reconstruction, then the
upsampled result initializes full-resolution joint optimization with the
entropy codec across every rate point.  The first frame trains the color
decoder and codec weights; later frames train residuals only, so one header
serves the whole group.  Per-rate reconstruction chains are kept drift-free
by re-deriving each rate's residual against that rate's own previous
reconstruction at encode time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import config
from .autodiff import Mlp, Tensor
from .bitstream import GofBitstream
from .codec import canonical_codec, codec_to_block, encode_frame, pack_mlp, phi_layer_sizes
from .entropy import (
    CodecModel,
    RatePoint,
    analysis_transform,
    context_transform,
    locations_flat,
    synthesis_transform,
)
from .errors import ConfigError, TrainingError
from .field import AXIS_PAIRS, DecodedBuffer, FrameField, ResidualField, compensate, resample_field
from .metrics import psnr_capped
from .render import RenderSettings, render_image, render_rays
from .scenes import SceneSpec, ray_trace_gt, scene_cameras

PAPER_LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.025, 0.0483, 0.0932, 0.18)
PAPER_A_INIT = (1.0, 1.3944, 1.9293, 2.6874, 3.7268, 5.1801, 7.1957, 10.0)


@dataclass
class TrainConfig:
    gof_length: int = 5  # paper-scale runs use 30
    stage1_iters: int = 300
    stage2_iters: int = 700
    rays_per_batch: int = 1024
    lr_fields: float = 1e-2
    lr_networks: float = 1e-3
    gamma1: float = 0.0001
    gamma2: float = 0.001
    lambdas: tuple = PAPER_LAMBDAS
    a_init: tuple = PAPER_A_INIT
    reference_rate_index: int = 4
    seed: int = 0
    channels: int = 8
    plane_res: int = 32
    grid_res: int = 32
    step_divisor: int = 256
    skip_threshold: float = 1e-4
    density_bias: float = -2.0
    float_mode: str = "f32"
    two_stage: bool = True
    codec_enabled: bool = True
    rd_slice_fraction: float = 0.25  # share of grid z-slices in each RD step
    probe_every: int = 0  # iterations between probe-loss records (0 = off)
    probe_rays: int = 2048

    def validate(self) -> "TrainConfig":
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gamma weights must be non-negative")
        if self.gof_length < 1:
            raise ConfigError("gof_length must be >= 1")
        if len(self.lambdas) != len(self.a_init):
            raise ConfigError("lambdas and a_init tables must have equal length")
        if not 0 <= self.reference_rate_index < len(self.lambdas):
            raise ConfigError("reference rate index outside the rate table")
        if any(l <= 0 for l in self.lambdas):
            raise ConfigError("lambdas must be positive")
        if self.plane_res % 2 or self.grid_res % 2:
            raise ConfigError("progressive training needs even plane/grid extents")
        if not 0 < self.rd_slice_fraction <= 1:
            raise ConfigError("rd_slice_fraction must be in (0, 1]")
        return self

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["lambdas"] = list(self.lambdas)
        d["a_init"] = list(self.a_init)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "lambdas" in kw:
            kw["lambdas"] = tuple(kw["lambdas"])
        if "a_init" in kw:
            kw["a_init"] = tuple(kw["a_init"])
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


@dataclass
class LossBreakdown:
    total: Tensor
    color: float
    res_l1: float
    rate_terms: list[float]
    dist_terms: list[float]
    rd: float
    stage: int

    def consistent(self, gamma1: float, gamma2: float, tol: float = 1e-9) -> bool:
        expected = self.color + gamma1 * self.res_l1
        if self.stage == 2:
            expected += gamma2 * self.rd
        return abs(self.total.item() - expected) <= tol * max(1.0, abs(expected))


# -- loss pieces ---------------------------------------------------------------


def loss_color(rendered: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over the ray batch of the squared color error norm."""
    diff = ad.add(rendered, Tensor(-np.asarray(gt, dtype=rendered.data.dtype)))
    return ad.tmean(ad.tsum(ad.mul(diff, diff), axis=1))


def loss_res(residual_tensors: dict[str, Tensor]) -> Tensor:
    """Mean absolute value over every residual element (all four components)."""
    total = None
    count = 0
    for t in residual_tensors.values():
        s = ad.tsum(ad.absolute(t))
        total = s if total is None else ad.add(total, s)
        count += t.data.size
    return ad.mul(total, 1.0 / count)


def loss_total(color: Tensor, res: Tensor, rd: Tensor | None, stage: int, gamma1: float, gamma2: float) -> LossBreakdown:
    """Eq.-7 style combination; stage 1 never evaluates the RD term."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    total = ad.add(color, ad.mul(res, gamma1))
    rd_val = 0.0
    if stage == 2:
        if rd is not None and gamma2 != 0.0:
            total = ad.add(total, ad.mul(rd, gamma2))
            rd_val = rd.item()
        elif rd is not None:
            rd_val = rd.item()
    return LossBreakdown(total, color.item(), res.item(), [], [], rd_val, stage)


@dataclass
class RdResult:
    total: Tensor
    rate_bits: list[float]
    distortions: list[float]
    recon_ref: dict[str, Tensor] | None


COMPONENT_ORDER = (*AXIS_PAIRS, "grid")
_LN2 = float(np.log(2.0))


def _bits_weighted(scaled: Tensor, m: Tensor, s: Tensor, weights: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Code length in bits of scaled-domain values under N(m, s), with a
    per-location weight (used to rescale grid-slice subsamples).

    Sums over the trailing two axes; a leading rate axis survives.
    """
    upper = ad.div(ad.add(ad.add(scaled, 0.5), ad.mul(m, -1.0)), s)
    lower = ad.div(ad.add(ad.add(scaled, -0.5), ad.mul(m, -1.0)), s)
    p = ad.clip_min(ad.add(ad.gauss_cdf(upper), ad.mul(ad.gauss_cdf(lower), -1.0)), floor)
    bits = ad.mul(ad.log(p), -1.0 / _LN2)
    per_loc = ad.tsum(bits, axis=p.data.ndim - 1)
    w = weights.reshape((1, -1) if per_loc.data.ndim == 2 else (-1,))
    return ad.tsum(ad.mul(per_loc, w), axis=per_loc.data.ndim - 1)


def loss_rd(
    stacks: dict[str, Tensor],
    model: CodecModel,
    rate_points: list[RatePoint],
    noise_rng: np.random.Generator | None,
    reference_index: int | None = None,
    slice_ids: np.ndarray | None = None,
    relax_quantization: bool = False,
) -> RdResult:
    """Variable-rate RD loss: sum over rate points of estimated bits plus
    lambda-weighted residual distortion, all rate points batched.

    `slice_ids` restricts rate/distortion to a subset of grid z-slices
    (rescaled to stay unbiased); the reference reconstruction, when
    requested, is always synthesized at full resolution.
    `relax_quantization` replaces rounding with identity for FD checks.
    """
    from .entropy import entropy_params_batch

    grid_t = stacks["grid"]
    dz = grid_t.data.shape[2]
    nrates = len(rate_points)
    y = analysis_transform(stacks, model)

    def ste(t: Tensor, step) -> Tensor:
        return t if relax_quantization else ad.ste_round_scaled(t, step)

    recon_ref = None
    if reference_index is not None:
        a_ref = rate_points[reference_index].a_tensor()
        y_hat_full = {name: ste(t, a_ref) for name, t in y.items()}
        recon_ref = synthesis_transform(y_hat_full, model, grid_t.data.shape)

    # optional grid-slice subsampling; the per-slice CNN only runs on the
    # sampled slices, with contributions rescaled to stay unbiased
    grid_weight = 1.0
    sel = None
    if slice_ids is not None and slice_ids.size < dz:
        sel = slice_ids
        grid_weight = dz / slice_ids.size
    y_sub = {n: y[n] for n in AXIS_PAIRS}
    y_sub["grid"] = y["grid"] if sel is None else y["grid"][sel]
    z = context_transform(y_sub, model)
    z_hat = {name: ste(z[name], 1.0) for name in z}

    y_parts = [locations_flat(y_sub[n]) for n in COMPONENT_ORDER]
    z_parts = [locations_flat(z[n]) for n in COMPONENT_ORDER]
    zh_parts = [locations_flat(z_hat[n]) for n in COMPONENT_ORDER]
    y_flat = ad.concat(y_parts, axis=0)
    z_flat = ad.concat(z_parts, axis=0)
    zh_flat = ad.concat(zh_parts, axis=0)
    n_plane = sum(p.data.shape[0] for p in y_parts[:3])
    n_total = y_flat.data.shape[0]
    weights = np.ones(n_total, dtype=y_flat.data.dtype)
    weights[n_plane:] = grid_weight

    def noise_like(shape):
        if noise_rng is None or relax_quantization:
            return None
        return noise_rng.random(shape, dtype=np.float32).astype(config.dtype(), copy=False) - config.dtype()(0.5)

    # context rate: factorized zero-mean prior, unit step (once per frame,
    # replicated per record in the stream, hence the nrates multiplier)
    sig_z = ad.mul(ad.reshape(model.z_scales(), (1, -1)), Tensor(np.ones_like(z_flat.data)))
    z_vals = z_flat
    nz = noise_like(z_flat.data.shape)
    if nz is not None:
        z_vals = ad.add(z_vals, Tensor(nz))
    bits_z = _bits_weighted(z_vals, Tensor(np.zeros_like(z_flat.data)), sig_z, weights)

    # y rate, all rate points in one batch
    a_tensors = [rp.a_tensor() for rp in rate_points]
    a_stack = ad.concat([ad.reshape(a, (1, 1, 1)) for a in a_tensors], axis=0)
    mu, sig = entropy_params_batch(zh_flat, a_tensors, model)
    cy = model.channels
    y3 = ad.reshape(y_flat, (1, n_total, cy))
    scaled = ad.div(y3, a_stack)
    ny = noise_like((nrates, n_total, cy))
    if ny is not None:
        scaled = ad.add(scaled, Tensor(ny))
    bits_y = _bits_weighted(scaled, ad.div(mu, a_stack), ad.div(sig, a_stack), weights)  # (R,)

    # distortion per rate: synthesis of the straight-through latent
    if relax_quantization:
        y_hat = ad.mul(y3, Tensor(np.ones((nrates, 1, 1), dtype=y3.data.dtype)))
    else:
        y_hat = ad.ste_round_scaled(y3, a_stack)  # (R, N, Cy)
    rec_flat = model.synthesis(ad.reshape(y_hat, (nrates * n_total, cy)))
    rec = ad.reshape(rec_flat, (nrates, n_total, model.channels))
    rec_planes = rec[:, :n_plane, :]
    rec_grid_feat = ad.reshape(rec[:, n_plane:, :], ((n_total - n_plane) * nrates, model.channels))
    rec_grid = ad.reshape(
        ad.add(ad.matmul(rec_grid_feat, model.grid_out[0]), model.grid_out[1]), (nrates, n_total - n_plane, 1)
    )
    plane_flats = [
        ad.reshape(ad.transpose(stacks[n], (1, 2, 0)), (-1, stacks[n].data.shape[0])) for n in AXIS_PAIRS
    ]
    target_planes = ad.reshape(ad.concat(plane_flats, axis=0), (1, n_plane, -1))
    g_target = stacks["grid"] if sel is None else ad.transpose(ad.transpose(stacks["grid"], (2, 0, 1))[sel], (1, 2, 0))
    target_grid = ad.reshape(ad.transpose(g_target, (2, 0, 1)), (1, n_total - n_plane, 1))
    dp = ad.add(rec_planes, ad.mul(target_planes, -1.0))
    dg = ad.add(rec_grid, ad.mul(target_grid, -1.0))
    total_elems = sum(t.data.size for t in stacks.values())
    sq_planes = ad.tsum(ad.tsum(ad.mul(dp, dp), axis=2), axis=1)
    sq_grid = ad.mul(ad.tsum(ad.tsum(ad.mul(dg, dg), axis=2), axis=1), grid_weight)
    dist = ad.mul(ad.add(sq_planes, sq_grid), 1.0 / total_elems)  # (R,)

    lam_vec = np.asarray([rp.lam for rp in rate_points], dtype=config.dtype())
    total = ad.add(ad.tsum(ad.add(bits_y, ad.mul(dist, Tensor(lam_vec)))), ad.mul(bits_z, float(nrates)))
    bz = bits_z.item()
    rate_bits = [float(b) + bz for b in bits_y.data]
    distortions = [float(d) for d in dist.data]
    return RdResult(total, rate_bits, distortions, recon_ref)


# -- training -------------------------------------------------------------------


@dataclass
class FrameMetrics:
    frame: int
    rate_index: int
    payload_bytes: int
    z_bytes: int
    y_bytes: int
    est_bits: float
    actual_bits: int
    psnr_train: float
    psnr_test: float
    wall_time_s: float


@dataclass
class GofResult:
    bitstream: GofBitstream
    metrics: list[FrameMetrics]
    traces: dict


class FrameRays:
    """Flattened (origin, direction, color) triples of one frame's train views."""

    def __init__(self, cameras, images, split_ids):
        from .render import _pixel_directions

        origins, dirs, colors = [], [], []
        for ci in split_ids:
            cam = cameras[ci]
            h, w = cam.height, cam.width
            uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
            d = _pixel_directions(cam, uu.reshape(-1), vv.reshape(-1))
            origins.append(np.broadcast_to(cam.eye, d.shape).copy())
            dirs.append(d)
            colors.append(images[ci].reshape(-1, 3))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.colors = np.concatenate(colors)

    def batch(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.origins.shape[0], size=n)
        return self.origins[idx], self.dirs[idx], self.colors[idx]

    def probe(self, seed: int, n: int):
        idx = config.rng(seed).integers(0, self.origins.shape[0], size=n)
        return self.origins[idx], self.dirs[idx], self.colors[idx]


def _zero_residual_tensors(channels: int, plane_res: int, grid_res: int, trainable: bool = True) -> dict[str, Tensor]:
    dt = config.dtype()
    out = {
        name: Tensor(np.zeros((channels, plane_res, plane_res), dtype=dt), requires_grad=trainable, name=f"res.{name}")
        for name in AXIS_PAIRS
    }
    out["grid"] = Tensor(np.zeros((grid_res,) * 3, dtype=dt), requires_grad=trainable, name="res.grid")
    return out


def _residual_field_from_tensors(tensors: dict[str, Tensor], bbox, channels: int) -> ResidualField:
    return ResidualField(
        {name: np.asarray(tensors[name].data, dtype=np.float64).copy() for name in AXIS_PAIRS},
        np.asarray(tensors["grid"].data, dtype=np.float64).copy(),
        np.asarray(bbox, dtype=np.float64).reshape(2, 3),
        channels,
    )


def _combined_field_tensors(base: FrameField, residual: dict[str, Tensor]):
    dt = config.dtype()
    planes = {name: ad.add(residual[name], Tensor(base.planes[name].astype(dt))) for name in AXIS_PAIRS}
    grid = ad.add(residual["grid"], Tensor(base.grid.astype(dt)))
    return planes, grid


class GofTrainer:
    """Trains one group of frames end to end and emits its bitstream."""

    def __init__(self, spec: SceneSpec, cfg: TrainConfig, images: dict[int, list[np.ndarray]] | None = None):
        cfg.validate()
        self.spec = spec
        self.cfg = cfg
        config.set_float_mode(cfg.float_mode)
        self.cameras = scene_cameras(spec)
        ncams = len(self.cameras)
        self.test_ids = [i for i in spec.test_cameras if i < ncams]
        self.train_ids = [i for i in range(ncams) if i not in self.test_ids]
        self.bbox = np.asarray(spec.bbox, dtype=np.float64).reshape(2, 3)
        self.images = images if images is not None else self._render_gt()
        rngs = config.spawn_rngs(cfg.seed, 4)
        self.init_rng, self.ray_rng, self.noise_rng, self.misc_rng = rngs
        self.phi = Mlp.create(phi_layer_sizes(cfg.channels), self.init_rng, name="phi")
        self.codec = CodecModel(cfg.channels, self.init_rng) if cfg.codec_enabled else None
        self.rate_points = [RatePoint.create(i, l, a) for i, (l, a) in enumerate(zip(cfg.lambdas, cfg.a_init))]
        self.settings_full = RenderSettings.for_bbox(
            self.bbox,
            divisor=cfg.step_divisor,
            skip_threshold=cfg.skip_threshold,
            density_bias=cfg.density_bias,
            background=spec.background,
        )
        self.settings_coarse = RenderSettings(
            self.settings_full.step * 2.0,
            skip_threshold=cfg.skip_threshold,
            density_bias=cfg.density_bias,
            background=spec.background,
        )
        self.traces: dict = {"stage1_loss": [], "stage2_loss": [], "probe": [], "stage1_end_probe": []}

    def _render_gt(self) -> dict[int, list[np.ndarray]]:
        return {t: [ray_trace_gt(self.spec, cam, t) for cam in self.cameras] for t in range(self.cfg.gof_length)}

    # -- stages ------------------------------------------------------------

    def train_stage1(self, prev_ref: FrameField, frame_rays: FrameRays, train_phi: bool) -> dict[str, Tensor]:
        """Coarse fit: half-resolution residual against the downsampled base."""
        cfg = self.cfg
        base = resample_field(prev_ref, "down2").astype(config.dtype())
        res = _zero_residual_tensors(cfg.channels, cfg.plane_res // 2, cfg.grid_res // 2)
        params = list(res.values()) + (self.phi.params() if train_phi else [])
        from .optim import AdamState, adam_step, zero_grads

        opt_fields = AdamState([res[k] for k in res], lr=cfg.lr_fields)
        opt_nets = AdamState(self.phi.params(), lr=cfg.lr_networks) if train_phi else None
        for it in range(cfg.stage1_iters):
            origins, dirs, gt = frame_rays.batch(self.ray_rng, cfg.rays_per_batch)
            planes, grid = _combined_field_tensors(base, res)
            rgb, _ = render_rays(origins, dirs, planes, grid, self.bbox, self.phi, self.settings_coarse)
            breakdown = loss_total(loss_color(rgb, gt), loss_res(res), None, 1, cfg.gamma1, cfg.gamma2)
            total = breakdown.total
            if not np.isfinite(total.item()):
                raise TrainingError(f"stage 1 loss diverged at iteration {it}", it)
            zero_grads(params)
            total.backward()
            adam_step(opt_fields, [res[k] for k in res])
            if train_phi:
                adam_step(opt_nets, self.phi.params())
            self.traces["stage1_loss"].append(total.item())
        return res

    def train_stage2(
        self,
        init_res: dict[str, Tensor] | None,
        prev_fields: dict[int, FrameField],
        frame_rays: FrameRays,
        train_networks: bool,
        iters: int | None = None,
    ) -> dict[str, Tensor]:
        """Full-resolution joint optimization across all rate points."""
        cfg = self.cfg
        ref = cfg.reference_rate_index
        base_ref = prev_fields[ref].astype(config.dtype())
        if init_res is None:
            res = _zero_residual_tensors(cfg.channels, cfg.plane_res, cfg.grid_res)
        else:
            up = resample_field(_residual_field_from_tensors(init_res, self.bbox, cfg.channels), "up2")
            res = {
                name: Tensor(up.planes[name].astype(config.dtype()), requires_grad=True, name=f"res.{name}")
                for name in AXIS_PAIRS
            }
            res["grid"] = Tensor(up.grid.astype(config.dtype()), requires_grad=True, name="res.grid")
        from .optim import AdamState, adam_step, zero_grads

        net_params = []
        if train_networks:
            net_params += self.phi.params()
            if self.codec is not None and cfg.gamma2 > 0:
                net_params += self.codec.params()
                net_params += [rp.a_raw for rp in self.rate_points]
        opt_fields = AdamState([res[k] for k in res], lr=cfg.lr_fields)
        opt_nets = AdamState(net_params, lr=cfg.lr_networks) if net_params else None
        dz = cfg.grid_res
        k_slices = max(1, int(round(cfg.rd_slice_fraction * dz)))
        use_codec = self.codec is not None and cfg.gamma2 > 0
        niters = cfg.stage2_iters if iters is None else iters

        for it in range(niters):
            origins, dirs, gt = frame_rays.batch(self.ray_rng, cfg.rays_per_batch)
            rd = None
            recon_ref = None
            if use_codec:
                start = (it * k_slices) % dz
                ids = (start + np.arange(k_slices)) % dz
                rd_out = loss_rd(
                    res,
                    self.codec,
                    self.rate_points,
                    self.noise_rng,
                    reference_index=ref,
                    slice_ids=np.sort(ids),
                )
                rd = rd_out.total
                recon_ref = rd_out.recon_ref
            if recon_ref is not None:
                planes = {n: ad.add(recon_ref[n], Tensor(base_ref.planes[n].astype(config.dtype()))) for n in AXIS_PAIRS}
                grid = ad.add(recon_ref["grid"], Tensor(base_ref.grid.astype(config.dtype())))
            else:
                planes, grid = _combined_field_tensors(base_ref, res)
            rgb, _ = render_rays(origins, dirs, planes, grid, self.bbox, self.phi, self.settings_full)
            breakdown = loss_total(loss_color(rgb, gt), loss_res(res), rd, 2, cfg.gamma1, cfg.gamma2)
            total = breakdown.total
            if not np.isfinite(total.item()):
                raise TrainingError(f"stage 2 loss diverged at iteration {it}", it)
            zero_grads([res[k] for k in res] + net_params)
            total.backward()
            adam_step(opt_fields, [res[k] for k in res])
            if opt_nets is not None:
                adam_step(opt_nets, net_params)
            self.traces["stage2_loss"].append(total.item())
            if cfg.probe_every and (it % cfg.probe_every == 0 or it == niters - 1):
                self.traces["probe"].append((it, self._probe_loss(res, base_ref, frame_rays)))
        return res

    def _probe_loss(self, res: dict[str, Tensor], base_ref: FrameField, frame_rays: FrameRays) -> float:
        origins, dirs, gt = frame_rays.probe(self.cfg.seed + 777, self.cfg.probe_rays)
        with ad.no_grad():
            planes, grid = _combined_field_tensors(base_ref, res)
            rgb, _ = render_rays(origins, dirs, planes, grid, self.bbox, self.phi, self.settings_full)
            return loss_color(rgb, gt).item()

    # -- whole group ---------------------------------------------------------

    def train_gof(self) -> GofResult:
        cfg = self.cfg
        zero = FrameField.zeros(cfg.channels, cfg.plane_res, cfg.grid_res, self.bbox, dtype=np.float64)
        nrates = len(self.rate_points)
        buffer = DecodedBuffer({i: zero.copy() for i in range(nrates)}, 0)
        metrics: list[FrameMetrics] = []
        all_records = []
        rate_table: list[tuple[float, float]] = []

        for t in range(cfg.gof_length):
            t_start = time.monotonic()
            frame_rays = FrameRays(self.cameras, self.images[t], self.train_ids)
            is_iframe = t == 0
            ref = cfg.reference_rate_index
            prev_ref = buffer.get(ref)

            if cfg.two_stage:
                coarse = self.train_stage1(prev_ref, frame_rays, train_phi=is_iframe)
                if cfg.probe_every:
                    up = resample_field(_residual_field_from_tensors(coarse, self.bbox, cfg.channels), "up2")
                    up_t = {n: Tensor(up.planes[n].astype(config.dtype())) for n in AXIS_PAIRS}
                    up_t["grid"] = Tensor(up.grid.astype(config.dtype()))
                    self.traces["stage1_end_probe"].append(
                        self._probe_loss(up_t, prev_ref.astype(config.dtype()), frame_rays)
                    )
                res = self.train_stage2(coarse, buffer.fields, frame_rays, train_networks=is_iframe)
            else:
                res = self.train_stage2(
                    None, buffer.fields, frame_rays, train_networks=is_iframe, iters=cfg.stage1_iters + cfg.stage2_iters
                )

            # freeze the rate table the first time we encode
            if t == 0:
                rate_table = [(rp.lam, rp.a_value()) for rp in self.rate_points]

            trained = _residual_field_from_tensors(res, self.bbox, cfg.channels)
            target = compensate(prev_ref, trained)  # reference target field
            canonical = canonical_codec(cfg.channels, self.codec.weight_arrays()) if self.codec else None
            if canonical is None:
                raise ConfigError("bitstream emission requires the codec to be enabled")

            new_fields = {}
            wall = time.monotonic() - t_start
            for rp in self.rate_points:
                i = rp.index
                res_i = ResidualField(
                    {n: target.planes[n] - buffer.get(i).planes[n] for n in AXIS_PAIRS},
                    target.grid - buffer.get(i).grid,
                    self.bbox.copy(),
                    cfg.channels,
                )
                enc = encode_frame(res_i, i, rate_table, canonical, frame_type=0 if is_iframe else 1)
                all_records.append(enc.record)
                recon = compensate(buffer.get(i), enc.reconstruction)
                new_fields[i] = recon
                ptrain, ptest = self._frame_psnrs(recon, t)
                metrics.append(
                    FrameMetrics(
                        frame=t,
                        rate_index=i,
                        payload_bytes=enc.record.payload_bytes,
                        z_bytes=len(enc.record.z_payload),
                        y_bytes=len(enc.record.y_payload),
                        est_bits=enc.est_bits,
                        actual_bits=enc.actual_bits,
                        psnr_train=ptrain,
                        psnr_test=ptest,
                        wall_time_s=wall,
                    )
                )
            buffer.update(new_fields, t)

        bs = GofBitstream(
            channels=cfg.channels,
            plane_dims={n: (cfg.plane_res, cfg.plane_res) for n in AXIS_PAIRS},
            grid_dims=(cfg.grid_res,) * 3,
            bbox=self.bbox,
            gof_length=cfg.gof_length,
            rate_table=rate_table,
            phi_block=pack_mlp(self.phi),
            entropy_block=codec_to_block(self.codec),
            records=all_records,
        )
        return GofResult(bs, metrics, self.traces)

    def _frame_psnrs(self, field: FrameField, t: int) -> tuple[float, float]:
        train_vals, test_vals = [], []
        f = field.astype(config.dtype())
        for ci, cam in enumerate(self.cameras):
            img, _ = render_image(f, self.phi, cam, self.settings_full)
            val = psnr_capped(img, self.images[t][ci])
            (test_vals if ci in self.test_ids else train_vals).append(val)
        return float(np.mean(train_vals)), float(np.mean(test_vals)) if test_vals else float("nan")
