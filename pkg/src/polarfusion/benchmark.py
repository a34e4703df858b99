"""Per-frame speed and size report for a trained network.

A frame's time covers one batch-of-one forward pass plus decoding. Camera and
radar preprocessing is timed separately and reported next to it.
"""
from __future__ import annotations

import os
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evaluation import THRESHOLDS, decode_detections
from .geometry import PolarGridSpec
from .network import FusionNet
from .nn import count_parameters
from .serialization import save_checkpoint
from .tensor import no_grad


@dataclass
class BenchmarkReport:
    params_millions: float
    n_params: int
    fps_mean: float
    fps_std: float  # sample standard deviation over frames
    model_mb: float
    n_frames: int
    preprocess_ms: float | None = None  # mean per frame, not part of the FPS figure

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [
            f"params (M)   {self.params_millions:.4f}  ({self.n_params})",
            f"FPS          {self.fps_mean:.2f}",
            f"sigma        {self.fps_std:.2f}",
            f"model (MB)   {self.model_mb:.4f}",
            f"frames       {self.n_frames}",
        ]
        if self.preprocess_ms is not None:
            lines.append(f"preproc (ms) {self.preprocess_ms:.2f}")
        return "\n".join(lines) + "\n"


def checkpoint_megabytes(model: FusionNet, path=None) -> float:
    """On-disk size of ``path``, or of a freshly written checkpoint when no path is given."""
    if path is not None:
        return Path(path).stat().st_size / 1e6
    fd, tmp = tempfile.mkstemp(suffix=".pfn")
    os.close(fd)
    try:
        return save_checkpoint(tmp, model) / 1e6
    finally:
        os.unlink(tmp)


def time_preprocessing(pre, frames) -> np.ndarray:
    """Seconds per frame for camera warp + radar reorganisation."""
    out = []
    for fr in frames:
        t0 = time.perf_counter()
        pre.sample(fr.frame_id, fr.camera, fr.radar, fr.objects)
        out.append(time.perf_counter() - t0)
    return np.array(out)


def benchmark(model: FusionNet, samples, grid: PolarGridSpec, checkpoint=None,
              threshold: float = min(THRESHOLDS), warmup: int = 1, preprocess_seconds=None) -> BenchmarkReport:
    if len(samples) < 2:
        raise ValueError("benchmark needs at least two frames")
    model.eval()
    fps = []
    with no_grad():
        for s in samples[:warmup]:
            model(s.camera[None], s.radar[None])
        for s in samples:
            t0 = time.perf_counter()
            pred = model(s.camera[None], s.radar[None])
            decode_detections((pred.cls.data[0], pred.reg.data[0]), threshold, grid)
            fps.append(1.0 / (time.perf_counter() - t0))
    n = count_parameters(model)
    pre = None if preprocess_seconds is None else float(np.mean(preprocess_seconds) * 1e3)
    return BenchmarkReport(
        params_millions=n / 1e6,
        n_params=n,
        fps_mean=float(np.mean(fps)),
        fps_std=float(np.std(fps, ddof=1)),
        model_mb=checkpoint_megabytes(model, checkpoint),
        n_frames=len(samples),
        preprocess_ms=pre,
    )
