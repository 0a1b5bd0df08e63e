"""Command-line entry points for the full pipeline.

Subcommands: gen-scene, train-encode, decode, render, rd-sweep, eval,
grad-check.  All tunables live in JSON configs; identical inputs plus seeds
reproduce identical outputs in f64 mode.  Exit codes: 0 ok, 2 usage error,
3 training failure, 4 stream corruption.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config
from .bitstream import GofBitstream
from .errors import ConfigError, CorruptionError, TrainingError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_CORRUPTION = 4


def _out_dir(args) -> Path:
    out = Path(os.environ.get("VRVC_OUT_DIR") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(args):
    from .scenes import load_scene, scene_presets

    if args.preset:
        presets = scene_presets()
        if args.preset not in presets:
            raise ConfigError(f"unknown preset {args.preset!r}; have {sorted(presets)}")
        return presets[args.preset]
    if args.scene:
        return load_scene(args.scene)
    raise ConfigError("need --preset or --scene")


def cmd_gen_scene(args) -> int:
    from .images import write_png, write_ppm
    from .scenes import ray_trace_gt, scene_cameras

    spec = _load_scene(args)
    out = _out_dir(args)
    cameras = scene_cameras(spec)
    manifest = {
        "scene": spec.to_json(),
        "cameras": [
            {"id": i, "split": "test" if i in set(spec.test_cameras) else "train", **cam.to_json()}
            for i, cam in enumerate(cameras)
        ],
        "images": [],
    }
    fmt = args.format
    for t in range(spec.frame_count):
        frame_dir = out / f"frame_{t:03d}"
        frame_dir.mkdir(exist_ok=True)
        for i, cam in enumerate(cameras):
            img = ray_trace_gt(spec, cam, t)
            name = f"cam_{i:02d}.{fmt}"
            path = frame_dir / name
            (write_ppm if fmt == "ppm" else write_png)(path, img)
            manifest["images"].append({"frame": t, "camera": i, "path": f"frame_{t:03d}/{name}"})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {len(manifest['images'])} images and manifest.json to {out}")
    return EXIT_OK


def _read_manifest(scene_dir: Path):
    from .images import read_png, read_ppm
    from .scenes import SceneSpec

    mpath = Path(scene_dir) / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no manifest.json under {scene_dir}")
    with open(mpath) as f:
        manifest = json.load(f)
    spec = SceneSpec.from_json(manifest["scene"])
    images: dict[int, dict[int, np.ndarray]] = {}
    for entry in manifest["images"]:
        p = Path(scene_dir) / entry["path"]
        img = read_ppm(p) if p.suffix == ".ppm" else read_png(p)
        images.setdefault(entry["frame"], {})[entry["camera"]] = img
    frames = {t: [images[t][i] for i in sorted(images[t])] for t in images}
    return spec, manifest, frames


def cmd_train_encode(args) -> int:
    from .train import GofTrainer, TrainConfig

    spec, _, frames = _read_manifest(Path(args.scene_dir))
    cfg = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.float_mode:
        cfg.float_mode = args.float_mode
    cfg.validate()
    out = _out_dir(args)
    config.set_float_mode(cfg.float_mode)
    n_gofs = (spec.frame_count + cfg.gof_length - 1) // cfg.gof_length
    rows = []
    t0 = time.monotonic()
    for g in range(n_gofs):
        lo = g * cfg.gof_length
        hi = min(lo + cfg.gof_length, spec.frame_count)
        sub_images = {t - lo: frames[t] for t in range(lo, hi)}
        gof_cfg = TrainConfig.from_json({**cfg.to_json(), "gof_length": hi - lo, "seed": cfg.seed + g})
        trainer = GofTrainer(spec, gof_cfg, images=sub_images)
        result = trainer.train_gof()
        path = out / f"gof_{g:03d}.vrvc"
        result.bitstream.write(path)
        for m in result.metrics:
            rows.append((lo + m.frame, m.rate_index, m.actual_bits, m.psnr_train, m.psnr_test, m.wall_time_s))
        print(f"gof {g}: frames {lo}..{hi - 1} -> {path} ({path.stat().st_size} bytes)")
    # wall times are suppressed in f64 mode so reruns are byte-identical
    deterministic = cfg.float_mode == "f64"
    with open(out / "training_metrics.csv", "w") as f:
        f.write("frame,rate_index,bits,psnr_train,psnr_test,wall_time_s\n")
        for frame, ridx, bits, ptr, pte, wall in rows:
            wall_s = "0.000" if deterministic else f"{wall:.3f}"
            f.write(f"{frame},{ridx},{bits},{ptr:.4f},{pte:.4f},{wall_s}\n")
    print(f"trained {n_gofs} GoF(s) in {time.monotonic() - t0:.1f}s; metrics -> training_metrics.csv")
    return EXIT_OK


def _load_bitstreams(path: Path) -> list[GofBitstream]:
    p = Path(path)
    files = sorted(p.glob("gof_*.vrvc")) if p.is_dir() else [p]
    if not files:
        raise ConfigError(f"no .vrvc bitstreams under {p}")
    return [GofBitstream.read(f) for f in files]


def _camera_for(args, spec, manifest):
    from .render import Camera

    if args.camera_json:
        with open(args.camera_json) as f:
            return Camera.from_json(json.load(f))
    from .scenes import scene_cameras

    cams = scene_cameras(spec)
    if not 0 <= args.view < len(cams):
        raise ConfigError(f"view {args.view} out of range (0..{len(cams) - 1})")
    return cams[args.view]


def cmd_decode(args) -> int:
    from .codec import decode_fields, decode_gof_model
    from .images import write_png, write_ppm
    from .render import RenderSettings, render_image

    streams = _load_bitstreams(Path(args.bitstream))
    frame = args.frame
    gof_idx = 0
    while gof_idx < len(streams) and frame >= streams[gof_idx].gof_length:
        frame -= streams[gof_idx].gof_length
        gof_idx += 1
    if gof_idx >= len(streams):
        raise ConfigError(f"frame {args.frame} beyond the coded sequence")
    bs = streams[gof_idx]
    if not 0 <= args.rate_index < len(bs.rate_table):
        raise ConfigError(f"rate index {args.rate_index} out of range (0..{len(bs.rate_table) - 1})")
    model, phi = decode_gof_model(bs)
    fields = decode_fields(bs, args.rate_index, up_to_frame=frame, model=model)
    field = fields[-1]
    if args.camera_json:
        from .render import Camera

        with open(args.camera_json) as f:
            cam = Camera.from_json(json.load(f))
    else:
        spec, manifest, _ = _read_manifest(Path(args.scene_dir))
        cam = _camera_for(args, spec, manifest)
    settings = RenderSettings.for_bbox(bs.bbox, background=tuple(args.background))
    img, _ = render_image(field, phi, cam, settings)
    out = Path(args.out_image)
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_ppm if out.suffix == ".ppm" else write_png)(out, img)
    print(f"decoded frame {args.frame} rate {args.rate_index} -> {out}")
    return EXIT_OK


def cmd_rd_sweep(args) -> int:
    from .metrics import rd_csv, rd_dat, rd_sweep

    spec, _, frames = _read_manifest(Path(args.scene_dir))
    streams = _load_bitstreams(Path(args.bitstream))
    images = {t: frames[t] for t in frames}
    points, header_kb = rd_sweep(streams, spec, images)
    out = _out_dir(args)
    lambdas = [l for l, _ in streams[0].rate_table]
    csv_text = rd_csv(spec.name, points, lambdas)
    (out / "rd_sweep.csv").write_text(csv_text)
    for split in ("train", "test"):
        (out / f"rd_{split}.dat").write_text(rd_dat(points, split))
    (out / "rd_header.json").write_text(json.dumps({"header_kb_per_frame": header_kb}, indent=2))
    print(csv_text.rstrip("\n"))
    print(f"# header_kb_per_frame={header_kb:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import bd_rate

    def read_curve(path, split):
        rows = []
        for line in Path(path).read_text().strip().split("\n")[1:]:
            parts = line.split(",")
            if parts[1] == split:
                rows.append((float(parts[4]), float(parts[5])))
        return rows

    for split in ("train", "test"):
        test_curve = read_curve(args.csv, split)
        if args.reference_csv:
            ref_curve = read_curve(args.reference_csv, split)
            value = bd_rate(ref_curve, test_curve)
            print(f"{split}: BD-rate vs reference = {value:+.2f}%")
        else:
            rates = [r for r, _ in test_curve]
            qs = [q for _, q in test_curve]
            print(f"{split}: {len(test_curve)} points, rate {min(rates):.2f}..{max(rates):.2f} KB, PSNR {min(qs):.2f}..{max(qs):.2f} dB")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import run_gradient_suite

    report = run_gradient_suite(verbose=True)
    return EXIT_OK if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrvc", description="variable-rate volumetric video codec")
    parser.add_argument("--threads", type=int, default=os.cpu_count(), help="worker hint (numpy/BLAS decide)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write ground-truth images and a manifest")
    g.add_argument("--preset", help="named scene preset")
    g.add_argument("--scene", help="SceneSpec JSON path")
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=("png", "ppm"), default="png")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train-encode", help="train a GoF sequence and emit bitstreams")
    t.add_argument("--scene-dir", required=True, help="directory from gen-scene")
    t.add_argument("--train-config", help="TrainConfig JSON path")
    t.add_argument("--seed", type=int)
    t.add_argument("--float-mode", choices=("f32", "f64"))
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_encode)

    for name, help_text in (("decode", "reconstruct one frame and render one view"), ("render", "render a view from a bitstream")):
        d = sub.add_parser(name, help=help_text)
        d.add_argument("--bitstream", required=True, help=".vrvc file or directory of them")
        d.add_argument("--rate-index", type=int, required=True)
        d.add_argument("--frame", type=int, required=True)
        d.add_argument("--scene-dir", help="manifest directory (for --view)")
        d.add_argument("--view", type=int, default=0, help="camera id from the manifest")
        d.add_argument("--camera-json", help="explicit camera (overrides --view)")
        d.add_argument("--background", type=float, nargs=3, default=(1.0, 1.0, 1.0))
        d.add_argument("--out-image", required=True)
        d.set_defaults(func=cmd_decode)

    r = sub.add_parser("rd-sweep", help="decode all rate points and tabulate RD metrics")
    r.add_argument("--bitstream", required=True)
    r.add_argument("--scene-dir", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rd_sweep)

    e = sub.add_parser("eval", help="summarize a sweep CSV or BD-rate against a reference")
    e.add_argument("--csv", required=True)
    e.add_argument("--reference-csv")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if os.environ.get("VRVC_THREADS"):
        args.threads = int(os.environ["VRVC_THREADS"])
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except CorruptionError as exc:
        print(f"corrupt bitstream: {exc}", file=sys.stderr)
        return EXIT_CORRUPTION


if __name__ == "__main__":
    sys.exit(main())
