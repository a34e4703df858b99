"""End-to-end runs: dataset loading, preprocessing, training, inference, evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig
from .evaluation import (THRESHOLDS, Detection, GtObject, MetricsReport, decode_detections, encode_targets,
                         evaluate, format_report, read_detections_csv, write_detections_csv, write_key_values)
from .geometry import (CameraModel, PolarGridSpec, RgbImage, bev_image_to_tensor, build_camera_model,
                       camera_to_polar, image_to_bev_cartesian, polar_image_to_tensor)
from .imageio import read_calibration, read_ppm, write_ppm
from .loss import TargetMaps, detection_loss_node
from .network import FusionNet, build_network
from .nn import recalibrate_batchnorm
from .optim import AdamState, adam_update, step_decay_lr
from .radar import load_rd_tensor, prepare_radar_input
from .serialization import load_checkpoint, save_checkpoint
from .tensor import no_grad

log = logging.getLogger(__name__)

GT_COLOUR = (0.0, 1.0, 0.0)
PRED_COLOUR = (0.0, 0.0, 1.0)


class PipelineError(RuntimeError):
    pass


class TrainingError(PipelineError):
    pass


@dataclass
class Sample:
    frame_id: str
    camera: np.ndarray  # 3 x H x W, near edge first
    radar: np.ndarray  # 2*n_rx*n_tx x R x D
    objects: list
    view: RgbImage | None = None  # the warped camera raster, kept for overlays


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    optimizer: AdamState | None = None

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else math.nan


# ---------------------------------------------------------------------------
# preprocessing


class Preprocessor:
    """Camera -> polar (or Cartesian) input tensor; RD tensor -> stacked, MIMO-gathered channels."""

    def __init__(self, cfg: PipelineConfig, camera: CameraModel):
        self.cfg = cfg
        self.camera = camera
        self.representation = cfg.run.representation
        self.polar = cfg.camera_grid()
        self.cartesian = cfg.cartesian_grid()
        self.mimo = cfg.mimo_config()

    def camera_view(self, img: RgbImage) -> RgbImage:
        if self.representation == "polar":
            return camera_to_polar(img, self.camera, self.cfg.bev, self.polar)
        return image_to_bev_cartesian(img, self.camera, self.cartesian)

    def camera_tensor(self, view: RgbImage) -> np.ndarray:
        return polar_image_to_tensor(view) if self.representation == "polar" else bev_image_to_tensor(view)

    def radar_tensor(self, rd) -> np.ndarray:
        return prepare_radar_input(rd, self.mimo)

    def sample(self, frame_id, image: RgbImage, rd, objects) -> Sample:
        view = self.camera_view(image)
        return Sample(frame_id, self.camera_tensor(view), self.radar_tensor(rd), list(objects), view)


def samples_from_frames(frames, pre: Preprocessor, workers: int = 1) -> list:
    """In-memory synthetic frames -> samples (order preserved)."""

    def one(fr):
        return pre.sample(fr.frame_id, fr.camera, fr.radar, fr.objects)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, frames))
    return [one(fr) for fr in frames]


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class Dataset:
    root: Path
    manifest: dict
    camera: CameraModel | None

    @property
    def frame_ids(self) -> list:
        return [f["id"] for f in self.manifest["frames"]]


def open_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise PipelineError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    for f in manifest["frames"]:
        for key in ("camera", "radar", "labels"):
            if not (root / f[key]).is_file():
                raise PipelineError(f"missing {key} file for frame {f['id']}: {root / f[key]}")
    camera = None
    if manifest.get("calibration"):
        cal = read_calibration(root / manifest["calibration"])
        camera = build_camera_model(cal["intrinsics"], cal["height"], cal["pitch"])
    return Dataset(root, manifest, camera)


def load_samples(ds: Dataset, cfg: PipelineConfig, ids=None) -> list:
    if ds.camera is None:
        if ids:
            raise PipelineError("dataset has no calibration file")
        return []
    pre = Preprocessor(cfg, ds.camera)
    wanted = set(ds.frame_ids if ids is None else ids)
    entries = [f for f in ds.manifest["frames"] if f["id"] in wanted]

    def one(f):
        img = RgbImage(read_ppm(ds.root / f["camera"]))
        rd = load_rd_tensor(ds.root / f["radar"], n_tx=cfg.network.n_tx, expected_shape=cfg.radar_shape())
        gts = read_detections_csv(ds.root / f["labels"]).get(f["id"], [])
        return pre.sample(f["id"], img, rd, gts)

    if cfg.run.workers > 1:
        with ThreadPoolExecutor(cfg.run.workers) as pool:
            return list(pool.map(one, entries))
    return [one(f) for f in entries]


def split_ids(ids, fractions, seed: int) -> dict:
    """Seeded random split; counts are rounded so each part is within one frame of its fraction."""
    ids = sorted(ids)
    n = len(ids)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions.train * n))
    n_val = min(n - n_train, int(round(fractions.val * n)))
    shuffled = [ids[k] for k in perm]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


# ---------------------------------------------------------------------------
# training


def stack_batch(samples, grid: PolarGridSpec, dtype=np.float32):
    cam = np.stack([s.camera for s in samples]).astype(dtype)
    rad = np.stack([s.radar for s in samples]).astype(dtype)
    targets = [encode_targets(s.objects, grid, dtype) for s in samples]
    target = TargetMaps(np.stack([t.y_cls for t in targets]), np.stack([t.y_reg for t in targets]))
    return cam, rad, target


def train_model(model: FusionNet, samples, cfg: PipelineConfig, epochs: int | None = None,
                checkpoint_dir=None, optimizer: AdamState | None = None, start_epoch: int = 0) -> TrainHistory:
    """Adam over shuffled mini-batches; lr follows the step-decay schedule per epoch."""
    if not samples:
        raise PipelineError("no training frames")
    t = cfg.train
    epochs = t.epochs if epochs is None else epochs
    state = optimizer or AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2)
    rng = np.random.default_rng([cfg.run.seed, 1])
    grid = cfg.grid
    batches_cache = {}
    history = TrainHistory()
    model.train()
    params = model.parameters()
    for epoch in range(start_epoch, start_epoch + epochs):
        state.lr = step_decay_lr(t.lr, epoch, t.decay, t.decay_every)
        order = rng.permutation(len(samples))
        for b in range(0, len(order), t.batch_size):
            idx = tuple(int(k) for k in order[b:b + t.batch_size])
            if idx not in batches_cache:
                batches_cache[idx] = stack_batch([samples[k] for k in idx], grid, model.dtype)
            cam, rad, target = batches_cache[idx]
            pred = model(cam, rad)
            node, parts = detection_loss_node(pred, target, cfg.loss)
            loss = float(node.data)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {state.step}: "
                                    f"focal={parts['focal']} smooth_l1={parts['smooth_l1']} lr={state.lr}")
            model.zero_grad()
            node.backward()
            adam_update(params, [p.grad for p in params], state)
            history.rows.append({"epoch": epoch, "step": state.step, "lr": state.lr, "loss": loss,
                                 "focal": float(parts["focal"]), "smooth_l1": float(parts["smooth_l1"])})
        log.info("epoch %d loss %.6g lr %.3g", epoch, history.final_loss, state.lr)
        every = t.checkpoint_every
        if checkpoint_dir is not None and every and (epoch + 1) % every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.pfn", model, state,
                            extra={"epoch": epoch + 1})
    if t.recalibrate_bn and epochs > 0:
        chunks = [tuple(range(b, min(b + t.batch_size, len(samples)))) for b in range(0, len(samples), t.batch_size)]
        recalibrate_batchnorm(model, lambda idx: model(*stack_batch([samples[k] for k in idx], grid, model.dtype)[:2]),
                              chunks)
    model.eval()
    history.optimizer = state
    return history


def write_history(path, history: TrainHistory):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "lr", "loss", "focal", "smooth_l1"],
                           lineterminator="\n")
        w.writeheader()
        for row in history.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_maps(model: FusionNet, samples, batch_size: int = 4) -> list:
    """Eval-mode forward passes; returns per-frame (cls, reg) arrays."""
    model.eval()
    out = []
    with no_grad():
        for b in range(0, len(samples), batch_size):
            chunk = samples[b:b + batch_size]
            cam = np.stack([s.camera for s in chunk])
            rad = np.stack([s.radar for s in chunk])
            pred = model(cam, rad)
            out += [(pred.cls.data[k], pred.reg.data[k]) for k in range(len(chunk))]
    return out


def detect(model: FusionNet, samples, grid: PolarGridSpec, threshold: float = min(THRESHOLDS),
           batch_size: int = 4) -> list:
    return [decode_detections(m, threshold, grid) for m in predict_maps(model, samples, batch_size)]


def evaluate_model(model: FusionNet, samples, cfg: PipelineConfig) -> MetricsReport:
    dets = detect(model, samples, cfg.grid, cfg.eval.decode_threshold, cfg.train.batch_size)
    return evaluate(list(zip(dets, [s.objects for s in samples])), cfg.eval.iou_threshold, cfg.box_template())


def export_polar_overlay(polar_img: RgbImage, detections, gts, out_path, grid: PolarGridSpec, arm: int = 1):
    """Write a PPM of the polar raster with plus markers: ground truth green, predictions blue."""
    px = np.array(polar_img.pixels, dtype=np.float32, copy=True)
    if px.shape[:2] != (grid.n_range, grid.n_azimuth):
        raise ValueError(f"raster {px.shape[:2]} does not match grid {grid.n_range}x{grid.n_azimuth}")

    def mark(obj, colour):
        i, j = grid.polar_to_cell(obj.range, obj.azimuth)
        if not grid.contains_cell(i, j):
            return
        row = int(grid.range_bin_to_row(i))
        for dr, dc in [(0, 0)] + [(s * k, 0) for k in range(1, arm + 1) for s in (-1, 1)] + \
                      [(0, s * k) for k in range(1, arm + 1) for s in (-1, 1)]:
            r, c = row + dr, int(j) + dc
            if 0 <= r < px.shape[0] and 0 <= c < px.shape[1]:
                px[r, c] = colour

    for g in gts:
        mark(g, GT_COLOUR)
    for d in detections:
        mark(d, PRED_COLOUR)
    write_ppm(out_path, px)
    return out_path


# ---------------------------------------------------------------------------
# run_pipeline


def _frame_selection(ds: Dataset, cfg: PipelineConfig, which: str) -> list:
    if which == "all":
        return ds.frame_ids
    return split_ids(ds.frame_ids, cfg.split, cfg.run.seed)[which]


def _require_checkpoint(cfg: PipelineConfig) -> Path:
    ckpt = cfg.resolve("checkpoint")
    if not ckpt.is_file():
        raise PipelineError(f"checkpoint not found: {ckpt}")
    return ckpt


def preflight(cfg: PipelineConfig, mode: str):
    """Every check that can fail before anything is written."""
    if mode not in ("train", "infer", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    cfg.validate()
    ds = open_dataset(cfg.resolve("dataset"))
    if ds.camera is None:
        raise PipelineError("dataset has no frames")
    if mode in ("infer", "eval"):
        ckpt = _require_checkpoint(cfg)
        model, _, _ = load_checkpoint(ckpt)
        if model.config.grid != (cfg.grid.n_range, cfg.grid.n_azimuth):
            raise ConfigError(f"checkpoint grid {model.config.grid} does not match config grid")
        if model.config.camera_input != tuple(cfg.network.camera_input):
            raise ConfigError("checkpoint camera input does not match config")
        return ds, model
    return ds, None


def run_pipeline(cfg: PipelineConfig, mode: str, frames: str = "test", overlays: int = 0) -> dict:
    ds, model = preflight(cfg, mode)
    out = cfg.resolve("output")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"{mode}_config.ini")

    if mode == "train":
        split = split_ids(ds.frame_ids, cfg.split, cfg.run.seed)
        (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
        samples = load_samples(ds, cfg, split["train"])
        model = build_network(cfg.network_config())
        history = train_model(model, samples, cfg, checkpoint_dir=out / "checkpoints")
        ckpt = cfg.resolve("checkpoint")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        size = save_checkpoint(ckpt, model, extra={"epochs": cfg.train.epochs})
        write_history(out / "train_log.csv", history)
        return {"mode": mode, "frames": len(samples), "final_loss": history.final_loss,
                "checkpoint": str(ckpt), "checkpoint_bytes": size}

    ids = _frame_selection(ds, cfg, frames)
    samples = load_samples(ds, cfg, ids)
    dets = detect(model, samples, cfg.grid, cfg.eval.decode_threshold, cfg.train.batch_size)
    write_detections_csv(out / "detections.csv",
                         [(s.frame_id, d) for s, d_list in zip(samples, dets) for d in d_list])
    if overlays and cfg.run.representation == "polar":
        (out / "overlays").mkdir(exist_ok=True)
        for s, d_list in list(zip(samples, dets))[:overlays]:
            export_polar_overlay(s.view, d_list, s.objects, out / "overlays" / f"{s.frame_id}.ppm",
                                 cfg.camera_grid())
    result = {"mode": mode, "frames": len(samples), "detections": sum(len(d) for d in dets)}
    if mode == "eval":
        report = evaluate(list(zip(dets, [s.objects for s in samples])), cfg.eval.iou_threshold,
                          cfg.box_template())
        (out / "metrics.txt").write_text(format_report(report))
        write_key_values(out / "metrics.kv", report.as_dict())
        result["metrics"] = report.as_dict()
    return result


def evaluate_files(pred_csv, gt_csv, cfg: PipelineConfig) -> MetricsReport:
    """Score a detections CSV against a ground-truth CSV (frames missing from either side count as empty)."""
    preds = read_detections_csv(pred_csv)
    gts = read_detections_csv(gt_csv)
    ids = sorted(set(preds) | set(gts))
    frames = [([p for p in preds.get(i, []) if isinstance(p, Detection)],
               [GtObject(g.range, g.azimuth) for g in gts.get(i, [])]) for i in ids]
    return evaluate(frames, cfg.eval.iou_threshold, cfg.box_template())
