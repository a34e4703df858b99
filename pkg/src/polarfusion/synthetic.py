"""Desk-scale synthetic camera + radar frames with consistent polar labels.

Vehicles are flat, high-contrast rectangles on a textured ground plane, so the
perspective and polar warps have verifiable landmarks. The camera image is
produced by ray casting through the full pinhole model (not the homography).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import GtObject, write_detections_csv
from .geometry import BevGridSpec, CameraModel, PolarGridSpec, RgbImage, build_camera_model
from .imageio import write_calibration, write_ppm
from .radar import MimoConfig, RadarTargetSpec, RdTensor, save_rd_tensor, synth_rd_scene

SKY = np.array([0.62, 0.72, 0.9])
PALETTE = np.array([
    [0.95, 0.15, 0.1],
    [0.1, 0.35, 0.95],
    [0.95, 0.85, 0.1],
    [0.1, 0.85, 0.3],
    [0.9, 0.2, 0.85],
    [0.1, 0.9, 0.95],
])


@dataclass
class CameraSetup:
    image_size: tuple = (128, 224)
    focal: float = 160.0
    height: float = 3.0
    pitch: float = 8.0

    def intrinsics(self) -> np.ndarray:
        h, w = self.image_size
        return np.array([[self.focal, 0, (w - 1) / 2], [0, self.focal, (h - 1) / 2], [0, 0, 1.0]])

    def model(self) -> CameraModel:
        return build_camera_model(self.intrinsics(), self.height, self.pitch)


@dataclass
class SyntheticSceneSpec:
    vehicles: tuple = (1, 3)
    range_bounds: tuple = (8.0, 40.0)
    azimuth_bounds: tuple = (-30.0, 30.0)
    min_separation: float = 6.0
    radar_amplitude: float = 1.0
    radar_noise: float = 0.05
    supersample: int = 2
    vehicle_size: tuple = (4.0, 1.8)
    camera: CameraSetup = field(default_factory=CameraSetup)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Frame:
    frame_id: str
    objects: list
    camera: RgbImage
    radar: RdTensor


def ray_ground_points(model: CameraModel, rows, cols):
    """Intersect pixel rays with Z = 0. Returns (x, y, hit) where hit is False above the horizon."""
    pix = np.stack([cols, rows, np.ones_like(rows)], axis=-1).astype(np.float64)
    rays_cam = pix @ np.linalg.inv(model.intrinsics).T
    rays = rays_cam @ model.rotation  # camera -> vehicle (rotation is orthonormal)
    dz = rays[..., 2]
    hit = dz < -1e-9
    t = np.where(hit, -model.height / np.where(hit, dz, -1.0), 0.0)
    return t * rays[..., 0], t * rays[..., 1], hit


def render_ground(model: CameraModel, image_size, texture, supersample: int = 2) -> RgbImage:
    """Box-filtered render of ``texture(x, y) -> (..., 3)`` on the ground plane; sky above the horizon."""
    h, w = image_size
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    sub_r = (np.arange(h)[:, None] + offs[None, :]).ravel()
    sub_c = (np.arange(w)[:, None] + offs[None, :]).ravel()
    rr, cc = np.meshgrid(sub_r, sub_c, indexing="ij")
    x, y, hit = ray_ground_points(model, rr, cc)
    colour = np.where(hit[..., None], texture(np.where(hit, x, 0.0), np.where(hit, y, 0.0)), SKY)
    img = colour.reshape(h, s, w, s, 3).mean(axis=(1, 3))
    return RgbImage(img.astype(np.float32))


def checkerboard_texture(square: float, x0: float, x1: float, y0: float, y1: float, background=0.5):
    """Black/white squares on [x0, x1] x [y0, y1]; corners at multiples of ``square`` from (x0, y0)."""

    def texture(x, y):
        inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        parity = (np.floor((x - x0) / square) + np.floor((y - y0) / square)) % 2
        val = np.where(inside, parity, background)
        return np.repeat(val[..., None], 3, axis=-1)

    return texture


def scene_texture(objects, size=(4.0, 1.8), seed: int = 0):
    length, width = size

    def texture(x, y):
        # faint 2 m tiles so the ground is not featureless
        tiles = (np.floor(x / 2.0) + np.floor(y / 2.0)) % 2
        base = 0.42 + 0.06 * tiles
        out = np.repeat(base[..., None], 3, axis=-1)
        for k, obj in enumerate(objects):
            t = math.radians(obj.azimuth)
            cx, cy = obj.range * math.cos(t), obj.range * math.sin(t)
            inside = (np.abs(x - cx) <= length / 2) & (np.abs(y - cy) <= width / 2)
            out[inside] = PALETTE[(k + seed) % len(PALETTE)]
        return out

    return texture


def sample_objects(spec: SyntheticSceneSpec, rng: np.random.Generator, bev: BevGridSpec,
                   grid: PolarGridSpec, max_tries: int = 200) -> list:
    """Vehicles inside the BEV window and detection grid, in distinct non-adjacent cells."""
    n = int(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1))
    length, width = spec.vehicle_size
    objs, cells = [], []
    for _ in range(max_tries):
        if len(objs) == n:
            break
        r = float(rng.uniform(*spec.range_bounds))
        a = float(rng.uniform(*spec.azimuth_bounds))
        t = math.radians(a)
        x, y = r * math.cos(t), r * math.sin(t)
        if not (bev.xmin + length / 2 <= x <= bev.xmax - length / 2 and bev.ymin + width / 2 <= y <= bev.ymax - width / 2):
            continue
        i, j = grid.polar_to_cell(r, a)
        if not grid.contains_cell(i, j):
            continue
        if any(abs(i - ci) <= 1 and abs(j - cj) <= 1 for ci, cj in cells):
            continue
        if any(math.hypot(x - o.range * math.cos(math.radians(o.azimuth)),
                          y - o.range * math.sin(math.radians(o.azimuth))) < spec.min_separation for o in objs):
            continue
        objs.append(GtObject(r, a))
        cells.append((int(i), int(j)))
    return objs


def radar_targets(objects, rng, range_resolution: float, mimo: MimoConfig, amplitude: float) -> list:
    out = []
    for obj in objects:
        phase = rng.uniform(0, 2 * np.pi)
        out.append(RadarTargetSpec(
            range_bin=int(obj.range // range_resolution),
            doppler_bin=int(rng.integers(0, mimo.d_max)),
            amplitude=complex(amplitude * np.exp(1j * phase)),
            phase_step=float(np.pi * np.sin(np.radians(obj.azimuth))),
        ))
    return out


def generate_frame(frame_id: str, spec: SyntheticSceneSpec, rng: np.random.Generator, bev: BevGridSpec,
                   grid: PolarGridSpec, radar_shape: tuple, mimo: MimoConfig) -> Frame:
    n_range, _, n_rx = radar_shape
    objects = sample_objects(spec, rng, bev, grid)
    cam = spec.camera
    image = render_ground(cam.model(), cam.image_size, scene_texture(objects, spec.vehicle_size), spec.supersample)
    range_res = grid.max_range / n_range
    targets = radar_targets(objects, rng, range_res, mimo, spec.radar_amplitude)
    noise_seed = int(rng.integers(0, 2**31))
    rd = synth_rd_scene(targets, mimo, n_range=n_range, n_rx=n_rx, noise_sigma=spec.radar_noise, seed=noise_seed)
    return Frame(frame_id, objects, image, rd)


def generate_frames(spec: SyntheticSceneSpec, n_frames: int, bev: BevGridSpec, grid: PolarGridSpec,
                    radar_shape: tuple, mimo: MimoConfig) -> list:
    rng = np.random.default_rng(spec.seed)
    return [generate_frame(f"{k:06d}", spec, rng, bev, grid, radar_shape, mimo) for k in range(n_frames)]


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_frames: int, out_dir, bev: BevGridSpec,
                               grid: PolarGridSpec, radar_shape: tuple, mimo: MimoConfig) -> dict:
    """Write frames, labels and a manifest to ``out_dir``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_dict(),
        "bev": asdict(bev),
        "grid": asdict(grid),
        "radar_shape": list(radar_shape),
        "mimo": asdict(mimo),
        "calibration": None,
        "frames": [],
    }
    if n_frames > 0:
        (out / "frames").mkdir(exist_ok=True)
        cam = spec.camera
        write_calibration(out / "calibration.txt", cam.intrinsics(), cam.height, cam.pitch, bev.eta,
                          (bev.nrows, bev.ncols))
        manifest["calibration"] = "calibration.txt"
        rows = []
        for frame in generate_frames(spec, n_frames, bev, grid, radar_shape, mimo):
            stem = f"frames/{frame.frame_id}"
            write_ppm(out / f"{stem}_camera.ppm", frame.camera.pixels)
            save_rd_tensor(out / f"{stem}_radar.rdt", frame.radar)
            write_detections_csv(out / f"{stem}_gt.csv", [(frame.frame_id, o) for o in frame.objects])
            rows += [(frame.frame_id, o) for o in frame.objects]
            manifest["frames"].append({"id": frame.frame_id, "camera": f"{stem}_camera.ppm",
                                       "radar": f"{stem}_radar.rdt", "labels": f"{stem}_gt.csv"})
        write_detections_csv(out / "labels.csv", rows)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
