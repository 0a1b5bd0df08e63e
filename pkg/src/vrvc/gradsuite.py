"""Finite-difference verification of every differentiable primitive plus the
full micro-pipeline, at f64.

Each primitive is checked on randomized small instances against central
differences at 1e-4 relative tolerance; the end-to-end micro pipeline (2x2
planes, 2 rays, 1 rate point) runs at 1e-3 with quantization relaxed to its
smooth surrogate (rounding has no usable finite-difference derivative).
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import config
from .autodiff import Mlp, Tensor, grad_check

OP_TOL = 1e-4
PIPELINE_TOL = 1e-3
INSTANCES = 20


def _check_many(name, build, n=INSTANCES, tol=OP_TOL, seed=7):
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(n):
        f, params = build(rng)
        report = grad_check(f, params, tolerance=tol)
        worst = max(worst, report["max_rel_err"])
    return {"name": name, "max_rel_err": worst, "passed": worst < tol}


def _mlp_case(rng):
    net = Mlp.create([3, 5, 2], rng)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="x")
    proj = Tensor(rng.normal(size=(2, 2)))
    params = [x] + net.params()
    return (lambda: ad.tsum(ad.mul(net(x), proj))), params

def _conv_case(rng):
    k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True, name="k")
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, name="x")
    proj = Tensor(rng.normal(size=(1, 2, 4, 4)))
    return (lambda: ad.tsum(ad.mul(ad.conv3x3(x, k), proj))), [k, x]

def _bilinear_case(rng):
    from .field import bilinear_sample

    plane = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True, name="plane")
    uv = Tensor(rng.uniform(0.1, 0.9, size=(5, 2)), requires_grad=True, name="uv")
    proj = Tensor(rng.normal(size=(5, 2)))
    return (lambda: ad.tsum(ad.mul(bilinear_sample(plane, uv), proj))), [plane, uv]

def _trilinear_case(rng):
    from .field import trilinear_sample

    grid = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True, name="grid")
    pts = rng.uniform(0.1, 0.9, size=(5, 3))
    bbox = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    proj = Tensor(rng.normal(size=5))
    return (lambda: ad.tsum(ad.mul(trilinear_sample(grid, pts, bbox), proj))), [grid]

def _accumulate_case(rng):
    from .render import _composite_weights_from_sd

    sd = Tensor(rng.uniform(0.01, 1.5, size=(2, 6)), requires_grad=True, name="sd")
    feats = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True, name="feats")
    proj = Tensor(rng.normal(size=(2, 3)))

    def f():
        w = _composite_weights_from_sd(sd)
        acc = ad.tsum(ad.mul(ad.reshape(w, (2, 6, 1)), feats), axis=1)
        return ad.tsum(ad.mul(acc, proj))

    return f, [sd, feats]

def _decode_case(rng):
    from .render import _decode_batch

    phi = Mlp.create([9 + 27, 8, 3], rng)
    f = Tensor(rng.normal(size=(2, 9)), requires_grad=True, name="feat")
    d = rng.normal(size=(2, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    proj = Tensor(rng.normal(size=(2, 3)))
    return (lambda: ad.tsum(ad.mul(_decode_batch(f, d, phi), proj))), [f] + phi.params()

def _photometric_case(rng):
    # 2-sample render: weights, feature accumulation, decode, squared error
    from .render import _composite_weights_from_sd, _decode_batch
    from .train import loss_color

    phi = Mlp.create([3 + 27, 6, 3], rng)
    sd = Tensor(rng.uniform(0.05, 1.0, size=(1, 2)), requires_grad=True, name="sd")
    feats = Tensor(rng.normal(size=(1, 2, 1)), requires_grad=True, name="feats")
    d = np.array([[0.0, 0.0, 1.0]])
    gt = rng.uniform(0, 1, size=(1, 3))

    def f():
        w = _composite_weights_from_sd(sd)
        acc = ad.tsum(ad.mul(ad.reshape(w, (1, 2, 1)), feats), axis=1)
        return loss_color(_decode_batch(acc, d, phi), gt)

    return f, [sd, feats] + phi.params()

def _rate_case(rng):
    from .entropy import CodecModel, RatePoint, entropy_params, rate_estimate

    model = CodecModel(1, rng)
    rp = RatePoint.create(0, 0.01, float(rng.uniform(0.5, 4.0)))
    y = Tensor(rng.normal(size=(4, 1)), requires_grad=True, name="y")
    zf = Tensor(rng.normal(size=(4, 4)), requires_grad=True, name="z")
    noise = rng.uniform(-0.5, 0.5, size=(4, 1))

    def f():
        a_t = rp.a_tensor()
        mu, sig = entropy_params(zf, a_t, model)
        return rate_estimate(y, mu, sig, a_t, "train", noise=noise)

    return f, [y, zf, rp.a_raw] + model.entropy_mlp.params()

def _transform_case(rng):
    from .entropy import CodecModel, analysis_transform, synthesis_transform
    from .field import AXIS_PAIRS

    model = CodecModel(1, rng)
    planes = {n: Tensor(rng.normal(size=(1, 2, 2)), requires_grad=True, name=n) for n in AXIS_PAIRS}
    grid = Tensor(rng.normal(size=(2, 2, 2)), requires_grad=True, name="grid")
    projs = {n: Tensor(rng.normal(size=(1, 2, 2))) for n in AXIS_PAIRS}
    pg = Tensor(rng.normal(size=(2, 2, 2)))

    def f():
        stacks = dict(planes)
        stacks["grid"] = grid
        rec = synthesis_transform(analysis_transform(stacks, model), model, (2, 2, 2))
        total = ad.tsum(ad.mul(rec["grid"], pg))
        for n in AXIS_PAIRS:
            total = ad.add(total, ad.tsum(ad.mul(rec[n], projs[n])))
        return total

    params = [*planes.values(), grid] + model.analysis.params() + model.synthesis.params()
    return f, params


def micro_pipeline_check(tol: float = PIPELINE_TOL):
    """Full stage-2 objective on a 2x2-plane, 2-ray, 1-rate-point instance."""
    from .entropy import CodecModel, RatePoint
    from .field import AXIS_PAIRS, FrameField
    from .render import RenderSettings, render_rays
    from .train import loss_color, loss_rd, loss_res, loss_total

    rng = np.random.Generator(np.random.PCG64(11))
    bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    model = CodecModel(1, rng)
    rp = RatePoint.create(0, 0.18, 2.0)
    phi = Mlp.create([3 + 27, 6, 3], rng, name="phi")
    res = {n: Tensor(rng.normal(size=(1, 2, 2)) * 0.4, requires_grad=True, name=n) for n in AXIS_PAIRS}
    res["grid"] = Tensor(rng.normal(size=(2, 2, 2)) * 0.4, requires_grad=True, name="grid")
    base = FrameField.zeros(1, 2, 2, bbox, dtype=np.float64)
    noise_seed = 31

    from .render import look_at, _pixel_directions
    from .render import Camera

    eye = np.array([0.0, 0.0, -3.5])
    cam = Camera(3.0, 1.0, 1.0, look_at(eye, (0, 0, 0)), eye, 3, 3)
    dirs = _pixel_directions(cam, np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    origins = np.broadcast_to(eye, dirs.shape)
    gt = rng.uniform(0, 1, size=(2, 3))
    settings = RenderSettings(step=0.7, skip_threshold=0.0)

    def f():
        noise = np.random.Generator(np.random.PCG64(noise_seed))
        rd = loss_rd(res, model, [rp], noise, reference_index=0, relax_quantization=True)
        planes = {n: ad.add(rd.recon_ref[n], Tensor(base.planes[n])) for n in AXIS_PAIRS}
        grid = ad.add(rd.recon_ref["grid"], Tensor(base.grid))
        rgb, _ = render_rays(origins, dirs, planes, grid, bbox, phi, settings)
        breakdown = loss_total(loss_color(rgb, gt), loss_res(res), rd.total, 2, 0.0001, 0.001)
        return breakdown.total

    params = (
        list(res.values())
        + phi.params()
        + model.params()
        + [rp.a_raw]
    )
    report = grad_check(f, params, tolerance=tol)
    report["name"] = "micro-pipeline"
    return report


_OP_CASES = [
    ("mlp", _mlp_case),
    ("conv3x3", _conv_case),
    ("bilinear", _bilinear_case),
    ("trilinear", _trilinear_case),
    ("accumulate", _accumulate_case),
    ("decode_color", _decode_case),
    ("photometric", _photometric_case),
    ("rate_estimate", _rate_case),
    ("transforms", _transform_case),
]


def run_gradient_suite(verbose: bool = False) -> dict:
    """All primitive checks plus the micro pipeline; returns a summary dict."""
    with config.precision("f64"):
        t0 = time.monotonic()
        results = [_check_many(name, build) for name, build in _OP_CASES]
        results.append(micro_pipeline_check())
        elapsed = time.monotonic() - t0
    passed = all(r["passed"] for r in results)
    if verbose:
        for r in results:
            status = "ok" if r["passed"] else "FAIL"
            print(f"  {r['name']:<16} max rel err {r['max_rel_err']:.3e}  [{status}]")
        print(f"gradient suite {'passed' if passed else 'FAILED'} in {elapsed:.1f}s")
    return {"passed": passed, "elapsed_s": elapsed, "results": results}
