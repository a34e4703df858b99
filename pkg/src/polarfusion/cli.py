"""polarfusion command line: gen, train, infer, eval, bench, warp.

Each command prints a JSON summary on stdout. Failures print one JSON line
``{"error": ..., "message": ...}`` on stderr and exit nonzero; the
configuration is fully checked before any output is written.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .benchmark import benchmark, time_preprocessing
from .config import ConfigError, PipelineConfig
from .evaluation import format_report, write_key_values
from .geometry import RgbImage, camera_to_polar, image_to_bev_cartesian
from .imageio import ImageFormatError, read_ppm, write_ppm
from .network import build_network
from .pipeline import (PipelineError, Preprocessor, evaluate_files, preflight, run_pipeline,
                       samples_from_frames)
from .serialization import FormatError, load_checkpoint
from .synthetic import checkerboard_texture, generate_frames, generate_synthetic_dataset, render_ground

log = logging.getLogger("polarfusion")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg.run = dataclasses.replace(cfg.run, seed=args.seed)
    for attr in ("dataset", "checkpoint"):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.paths = dataclasses.replace(cfg.paths, **{attr: str(Path(value).resolve())})
    if args.out is not None:
        cfg.paths = dataclasses.replace(cfg.paths, output=str(Path(args.out).resolve()))
    train = {k: getattr(args, k) for k in ("epochs", "lr") if getattr(args, k, None) is not None}
    if train:
        cfg.train = dataclasses.replace(cfg.train, **train)
    return cfg.validate()


def _seed_for_numpy(seed: int) -> int:
    return seed % 2**63


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: PipelineConfig) -> dict:
    n = cfg.synthetic.n_frames if args.frames is None else args.frames
    if n < 0:
        raise ConfigError("frame count must be >= 0")
    out = Path(args.out) if args.out else cfg.resolve("dataset")
    spec = cfg.scene_spec(_seed_for_numpy(cfg.run.seed))
    manifest = generate_synthetic_dataset(spec, n, out, cfg.bev, cfg.grid, cfg.radar_shape(), cfg.mimo_config())
    cfg.save(out / "gen_config.ini")
    return {"command": "gen", "out": str(out), "frames": len(manifest["frames"])}


def cmd_run(args, cfg: PipelineConfig) -> dict:
    result = run_pipeline(cfg, args.command, **({} if args.command == "train" else
                                                {"frames": args.frames, "overlays": args.overlays}))
    return {"command": args.command, "out": str(cfg.resolve("output")), **result}


def cmd_eval_files(args, cfg: PipelineConfig) -> dict:
    for p in (args.pred, args.gt):
        if not Path(p).is_file():
            raise PipelineError(f"file not found: {p}")
    report = evaluate_files(args.pred, args.gt, cfg)
    out = cfg.resolve("output")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "eval_config.ini")
    (out / "metrics.txt").write_text(format_report(report))
    write_key_values(out / "metrics.kv", report.as_dict())
    return {"command": "eval", "out": str(out), "metrics": report.as_dict()}


def cmd_bench(args, cfg: PipelineConfig) -> dict:
    ckpt = None
    if args.fresh:
        model = build_network(cfg.network_config())
    else:
        ckpt = cfg.resolve("checkpoint")
        if not ckpt.is_file():
            raise PipelineError(f"checkpoint not found: {ckpt} (use --fresh to time an untrained network)")
        model, _, _ = load_checkpoint(ckpt)
    if args.frames < 2:
        raise ConfigError("bench needs at least 2 frames")
    spec = cfg.scene_spec(_seed_for_numpy(cfg.run.seed))
    frames = generate_frames(spec, args.frames, cfg.bev, cfg.grid, cfg.radar_shape(), cfg.mimo_config())
    pre = Preprocessor(cfg, spec.camera.model())
    pre_times = time_preprocessing(pre, frames)
    samples = samples_from_frames(frames, pre)
    report = benchmark(model, samples, cfg.grid, checkpoint=ckpt, preprocess_seconds=pre_times)
    out = cfg.resolve("output")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "bench_config.ini")
    (out / "bench.txt").write_text(report.format())
    write_key_values(out / "bench.kv", report.as_dict())
    return {"command": "bench", "out": str(out), **report.as_dict()}


def cmd_warp(args, cfg: PipelineConfig) -> dict:
    cam = cfg.camera
    model = cam.model()
    if args.image:
        img = RgbImage(read_ppm(args.image))
        if img.shape[:2] != tuple(cam.image_size):
            raise ConfigError(f"image is {img.shape[:2]}, camera config expects {tuple(cam.image_size)}")
    else:
        x0, x1, y0, y1 = cfg.bev.eta
        img = render_ground(model, cam.image_size, checkerboard_texture(args.square, x0, x1, y0, y1), 4)
    out = cfg.resolve("output")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "warp_config.ini")
    bev = image_to_bev_cartesian(img, model, cfg.bev)
    polar = camera_to_polar(img, model, cfg.bev, cfg.camera_grid())
    write_ppm(out / "camera.ppm", img.pixels)
    write_ppm(out / "bev.ppm", bev.pixels)
    write_ppm(out / "polar.ppm", polar.pixels)
    return {"command": "warp", "out": str(out), "bev_shape": list(bev.shape[:2]),
            "polar_shape": list(polar.shape[:2])}


def _check_run(args, cfg):
    """Everything run_pipeline would reject, checked before anything is written."""
    if args.command == "eval" and args.pred:
        if not args.gt:
            raise ConfigError("--pred needs --gt")
        return
    preflight(cfg, args.command)
    if args.command != "train" and args.frames not in ("train", "val", "test", "all"):
        raise ConfigError(f"unknown frame selection {args.frames!r}")


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", help="INI configuration file (defaults built in)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polarfusion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic camera + radar dataset")
    _common(p)
    p.add_argument("--frames", type=int, help="number of frames (default synthetic.n_frames)")

    p = sub.add_parser("train", help="train on the dataset's training split")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    for name, text in (("infer", "write detections for a split"), ("eval", "detections plus metrics")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--dataset")
        p.add_argument("--checkpoint")
        p.add_argument("--frames", default="test", help="train, val, test or all")
        p.add_argument("--overlays", type=int, default=0, help="write this many polar overlay images")
        if name == "eval":
            p.add_argument("--pred", help="score an existing detections CSV instead of running the network")
            p.add_argument("--gt", help="ground-truth CSV for --pred")

    p = sub.add_parser("bench", help="FPS, parameter count and model size")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--frames", type=int, default=20, help="synthetic frames to time")
    p.add_argument("--fresh", action="store_true", help="time an untrained network built from the config")

    p = sub.add_parser("warp", help="camera -> BEV -> polar debug images")
    _common(p)
    p.add_argument("--image", help="camera PPM (default: rendered ground checkerboard)")
    p.add_argument("--square", type=float, default=2.0, help="checkerboard square size in metres")
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        if args.command in ("train", "infer", "eval"):
            _check_run(args, cfg)
        if args.command == "gen":
            result = cmd_gen(args, cfg)
        elif args.command == "bench":
            result = cmd_bench(args, cfg)
        elif args.command == "warp":
            result = cmd_warp(args, cfg)
        elif args.command == "eval" and args.pred:
            result = cmd_eval_files(args, cfg)
        else:
            result = cmd_run(args, cfg)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except (PipelineError, FormatError, ImageFormatError, OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
