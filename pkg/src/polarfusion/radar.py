"""Range-Doppler tensors: I/O, real/imaginary channel stacking, MIMO reorganisation, synthesis.

With n_tx transmitters each imprinting a Doppler shift of ``delta`` bins, a
target at (range, doppler) shows up at doppler + k*delta (k = 0..n_tx-1) in
every receiver. Reorganisation gathers those replicas back onto one column.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .serialization import FormatError, load_tensor, save_tensor
from .tensor import ConvSpec, Tensor, conv2d


@dataclass
class RdTensor:
    """Complex samples indexed [range][doppler][rx]."""

    data: np.ndarray
    n_tx: int = 12

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"RD tensor must be range x doppler x rx, got {self.data.shape}")
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex64)
        if not np.isfinite(self.data).all():
            raise ValueError("RD tensor contains non-finite samples")

    @property
    def n_range(self) -> int:
        return self.data.shape[0]

    @property
    def d_max(self) -> int:
        return self.data.shape[1]

    @property
    def n_rx(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MimoConfig:
    n_tx: int = 12
    delta: int | None = None
    d_max: int = 256
    wrap: str = "modular"

    def __post_init__(self):
        if self.delta is None:
            object.__setattr__(self, "delta", self.d_max // self.n_tx)
        if self.n_tx < 1 or self.d_max < 1:
            raise ValueError("n_tx and d_max must be positive")
        if not 0 <= self.delta < self.d_max:
            raise ValueError(f"doppler shift {self.delta} outside [0, {self.d_max})")
        if self.wrap not in ("modular", "saturate"):
            raise ValueError(f"wrap must be 'modular' or 'saturate', got {self.wrap!r}")
        if self.n_tx * self.delta > self.d_max:
            warnings.warn(f"n_tx * delta = {self.n_tx * self.delta} exceeds d_max = {self.d_max}", stacklevel=3)

    def doppler_index(self) -> np.ndarray:
        """[k, d] -> source Doppler column for transmitter block k at output column d."""
        d = np.arange(self.d_max)[None, :] + self.delta * np.arange(self.n_tx)[:, None]
        return d % self.d_max if self.wrap == "modular" else np.minimum(d, self.d_max - 1)


@dataclass(frozen=True)
class RadarTargetSpec:
    range_bin: int
    doppler_bin: int
    amplitude: complex = 1.0
    phase_step: float = 0.0


def save_rd_tensor(path, rd: RdTensor):
    save_tensor(path, rd.data.astype(np.complex64))


def load_rd_tensor(path, n_tx: int = 12, expected_shape: tuple | None = None) -> RdTensor:
    arr = load_tensor(path)
    if arr.dtype != np.complex64 or arr.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D complex tensor, got {arr.dtype} {arr.shape}")
    if expected_shape is not None and arr.shape != tuple(expected_shape):
        raise FormatError(f"{path}: shape {arr.shape} != expected {tuple(expected_shape)}")
    return RdTensor(arr, n_tx=n_tx)


def stack_complex_channels(rd: RdTensor) -> np.ndarray:
    """2*n_rx x range x doppler float32; channel 2c is Re(rx c), 2c+1 is Im(rx c)."""
    z = rd.data.transpose(2, 0, 1)
    out = np.empty((2 * rd.n_rx,) + z.shape[1:], dtype=np.float32)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def unstack_complex_channels(stacked, n_tx: int = 12) -> RdTensor:
    s = np.asarray(stacked)
    z = (s[0::2] + 1j * s[1::2]).astype(np.complex64)
    return RdTensor(z.transpose(1, 2, 0), n_tx=n_tx)


def mimo_reorganize(x, cfg: MimoConfig) -> np.ndarray:
    """(..., C, R, D) -> (..., n_tx*C, R, D); block k at column d reads column (d + k*delta) mod D."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.shape[-1] != cfg.d_max:
        raise ValueError(f"input has {x.shape[-1]} Doppler bins, config expects {cfg.d_max}")
    idx = cfg.doppler_index()
    g = x[..., idx]  # (..., C, R, n_tx, D)
    g = np.moveaxis(g, -2, -4)  # (..., n_tx, C, R, D)
    lead = x.shape[:-3]
    return np.ascontiguousarray(g).reshape(lead + (cfg.n_tx * x.shape[-3],) + x.shape[-2:])


def mimo_reorganize_conv(x, cfg: MimoConfig) -> np.ndarray:
    """Same gather written as a dilated (1 x n_tx) convolution over a circularly padded Doppler axis."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    c = x.shape[-3]
    if cfg.delta == 0:
        return np.concatenate([x] * cfg.n_tx, axis=-3)
    cols = np.arange(cfg.d_max + (cfg.n_tx - 1) * cfg.delta)
    cols = cols % cfg.d_max if cfg.wrap == "modular" else np.minimum(cols, cfg.d_max - 1)
    ext = x[..., cols]
    weight = np.zeros((cfg.n_tx * c, c, 1, cfg.n_tx), dtype=x.dtype)
    for k in range(cfg.n_tx):
        weight[k * c + np.arange(c), np.arange(c), 0, k] = 1
    spec = ConvSpec(c, cfg.n_tx * c, (1, cfg.n_tx), dilation=(1, cfg.delta), has_bias=False)
    return conv2d(Tensor(ext), spec, Tensor(weight)).data


def synth_rd_scene(targets, cfg: MimoConfig, n_range: int = 512, n_rx: int = 16,
                   noise_sigma: float = 0.0, seed: int = 0) -> RdTensor:
    """Bin-level RD signatures: each target replicated n_tx times along Doppler across all receivers.

    Replica k in receiver c carries phase (k * n_rx + c) * phase_step (virtual-array ordering).
    """
    rng = np.random.default_rng(seed)
    data = np.zeros((n_range, cfg.d_max, n_rx), dtype=np.complex128)
    rx = np.arange(n_rx)
    idx = cfg.doppler_index()
    for t in targets:
        if not (0 <= t.range_bin < n_range and 0 <= t.doppler_bin < cfg.d_max):
            raise ValueError(f"target {t} outside the {n_range} x {cfg.d_max} tensor")
        for k in range(cfg.n_tx):
            d = idx[k, t.doppler_bin]
            data[t.range_bin, d, :] += t.amplitude * np.exp(1j * (k * n_rx + rx) * t.phase_step)
    if noise_sigma > 0:
        scale = noise_sigma / np.sqrt(2.0)
        data += scale * (rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape))
    return RdTensor(data.astype(np.complex64), n_tx=cfg.n_tx)


def prepare_radar_input(rd: RdTensor, cfg: MimoConfig) -> np.ndarray:
    """Stack real/imaginary channels and gather transmitter replicas: (2*n_rx*n_tx) x R x D."""
    return mimo_reorganize(stack_complex_channels(rd), cfg)
