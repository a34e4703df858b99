"""Dual-branch camera/radar fusion detector.

Camera branch: BEV-Polar image -> pre-encoder -> 4-stage residual encoder ->
skip-connected decoder -> azimuth expansion by swapping the azimuth axis into
the channel position, 1x1 conv, swap back.

Radar branch: MIMO-gathered RD tensor -> pre-encoder -> 4-stage residual
encoder -> per-level 1x1 conv producing the azimuth width, channel/Doppler
swap, range-only upsampling decoder.

Both branches land on the same range x azimuth grid, are concatenated and
fed to a conv-bn head with classification (sigmoid) and regression outputs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import BasicBlock, Conv2d, ConvBnRelu, ConvTranspose2d, Module, count_parameters
from .tensor import ConvSpec, ShapeError, Tensor, add, concat_channels, permute_axes, sigmoid


CLS_PRIOR = 0.01


def swap_channel_width(t: Tensor) -> Tensor:
    """Exchange the channel axis and the last (width) axis: C x H x W -> W x H x C."""
    order = (2, 1, 0) if t.data.ndim == 3 else (0, 3, 2, 1)
    return permute_axes(t, order)


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights (n_out x n_in) mapping bin centres of one raster onto another of the same extent."""
    u = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    eye = np.eye(n_in)
    return np.stack([np.interp(u, np.arange(n_in), eye[k]) for k in range(n_in)], axis=1)


@dataclass
class NetworkConfig:
    width: float = 1.0
    camera_input: tuple = (512, 256)
    radar_input: tuple = (512, 256)
    n_rx: int = 16
    n_tx: int = 12
    blocks: tuple = (3, 6, 6, 3)
    stage_channels: tuple = (32, 40, 64, 90, 124)
    decoder_channels: int = 128
    cam_channels: int = 128
    rad_channels: int = 128
    head_channels: tuple = (144, 96, 96, 96)
    grid: tuple = (128, 224)
    seed: int = 0
    block_type: str = "basic"
    cell_size: tuple = (0.8, 0.8)  # detection grid (range m, azimuth deg) per cell
    azimuth_center: float | None = None  # None -> grid azimuth bins / 2

    def __post_init__(self):
        for key in ("camera_input", "radar_input", "blocks", "stage_channels", "head_channels", "grid"):
            setattr(self, key, tuple(int(v) for v in getattr(self, key)))
        self.cell_size = tuple(float(v) for v in self.cell_size)
        if self.azimuth_center is None:
            self.azimuth_center = self.grid[1] / 2
        self.azimuth_center = float(self.azimuth_center)
        self.validate()

    def validate(self):
        if not 0 < self.width <= 1:
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width}")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError("blocks must list four positive stage depths")
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels must give pre-encoder + four stage widths")
        if len(self.head_channels) != 4:
            raise ValueError("head_channels must list four filter counts")
        if self.block_type != "basic":
            raise ValueError(f"unsupported block type {self.block_type!r}")
        gr, ga = self.grid
        for name, (h, w) in (("camera_input", self.camera_input), ("radar_input", self.radar_input)):
            if h % 16 or w % 16:
                raise ValueError(f"{name} {h}x{w} must be divisible by 16")
            if h // 4 != gr:
                raise ValueError(f"{name} height {h} does not reduce to grid range size {gr} (stride 4)")
        if ga < 1 or self.n_rx < 1 or self.n_tx < 1:
            raise ValueError("grid and antenna counts must be positive")

    def scaled(self, c: int) -> int:
        return max(1, math.ceil(c * self.width))

    @property
    def radar_in_channels(self) -> int:
        return 2 * self.n_rx * self.n_tx

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """The 1/8-width desk configuration (64x32 inputs, 4 rx, 3 tx)."""
        base = dict(width=1 / 8, camera_input=(64, 32), radar_input=(64, 32), n_rx=4, n_tx=3, grid=(16, 16))
        base.update(overrides)
        return cls(**base)


@dataclass
class DetectionMapPair:
    cls: Tensor
    reg: Tensor


def _check_input(t: Tensor, channels: int, size: tuple, what: str):
    if t.shape[-3:] != (channels,) + tuple(size):
        raise ShapeError(f"{what} input must be {channels}x{size[0]}x{size[1]}, got {t.shape}")


class Encoder(Module):
    """Pre-encoder plus four residual stages, each halving height and width."""

    def __init__(self, cin, cfg: NetworkConfig, rng, dtype):
        chans = [cfg.scaled(c) for c in cfg.stage_channels]
        self.pre = ConvBnRelu(cin, chans[0], rng, dtype, kernel=3)
        self.stages = []
        prev = chans[0]
        for depth, c in zip(cfg.blocks, chans[1:]):
            blocks = [BasicBlock(prev, c, rng, dtype, stride=2)]
            blocks += [BasicBlock(c, c, rng, dtype) for _ in range(depth - 1)]
            self.stages.append(_Stage(blocks))
            prev = c
        self.channels = tuple(chans)

    def forward(self, x):
        feats = [self.pre(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def _deconv(cin, cout, kernel, rng, dtype):
    return ConvTranspose2d(ConvSpec(cin, cout, kernel, kernel, (0, 0)), rng, dtype)


class CameraDecoder(Module):
    def __init__(self, enc_channels, cfg: NetworkConfig, rng, dtype):
        _, _, c2, c3, c4 = enc_channels
        mid = cfg.scaled(cfg.decoder_channels)
        self.out_channels = cfg.scaled(cfg.cam_channels)
        self.up4 = _deconv(c4, c3, (2, 2), rng, dtype)
        self.block4 = BasicBlock(2 * c3, mid, rng, dtype)
        self.up3 = _deconv(mid, c2, (2, 2), rng, dtype)
        self.block3 = BasicBlock(2 * c2, self.out_channels, rng, dtype)
        az_in = cfg.camera_input[1] // 4
        self.expand = Conv2d(ConvSpec(az_in, cfg.grid[1], (1, 1)), rng, dtype)
        # start the azimuth mix as plain resampling, so the layer begins translation-equivariant
        # instead of having to learn where every column goes
        self.expand.weight.data[:, :, 0, 0] = resample_matrix(az_in, cfg.grid[1])

    def forward(self, feats):
        _, _, x2, x3, x4 = feats
        y = self.block4(concat_channels(self.up4(x4), x3))
        y = self.block3(concat_channels(self.up3(y), x2))
        return self.expand_azimuth(y)

    def expand_azimuth(self, y):
        # C x R x A -> A x R x C, mix along azimuth, back to C x R x A'
        return swap_channel_width(self.expand(swap_channel_width(y)))


class RadarDecoder(Module):
    def __init__(self, enc_channels, cfg: NetworkConfig, rng, dtype):
        _, _, c2, c3, c4 = enc_channels
        ga = cfg.grid[1]
        d = cfg.radar_input[1]
        d2, d3, d4 = d // 4, d // 8, d // 16
        mid = cfg.scaled(cfg.decoder_channels)
        self.out_channels = cfg.scaled(cfg.rad_channels)
        self.lat4 = Conv2d(ConvSpec(c4, ga, (1, 1)), rng, dtype)
        self.lat3 = Conv2d(ConvSpec(c3, ga, (1, 1)), rng, dtype)
        self.lat2 = Conv2d(ConvSpec(c2, ga, (1, 1)), rng, dtype)
        self.up4 = _deconv(d4, d4, (2, 1), rng, dtype)
        self.block4 = BasicBlock(d4 + d3, mid, rng, dtype)
        self.up3 = _deconv(mid, mid, (2, 1), rng, dtype)
        self.block3 = BasicBlock(mid + d2, self.out_channels, rng, dtype)

    @staticmethod
    def swap(t):
        """Doppler <-> channel swap: C x R x D -> D x R x C."""
        return swap_channel_width(t)

    def forward(self, feats):
        _, _, x2, x3, x4 = feats
        t4 = self.swap(self.lat4(x4))
        t3 = self.swap(self.lat3(x3))
        t2 = self.swap(self.lat2(x2))
        y = self.block4(concat_channels(self.up4(t4), t3))
        return self.block3(concat_channels(self.up3(y), t2))


class DetectionHead(Module):
    def __init__(self, cin, cfg: NetworkConfig, rng, dtype):
        chans = [cfg.scaled(c) for c in cfg.head_channels]
        self.layers = []
        prev = cin
        for c in chans:
            self.layers.append(ConvBnRelu(prev, c, rng, dtype))
            prev = c
        self.cls = Conv2d(ConvSpec(prev, 1, (3, 3), padding=(1, 1)), rng, dtype)
        # start every cell at a low object prior so the many empty cells do not swamp early updates
        self.cls.bias.data[:] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
        self.reg = Conv2d(ConvSpec(prev, 2, (3, 3), padding=(1, 1)), rng, dtype)
        # regression outputs absolute (range, azimuth); a fixed map of cell centres is added so the
        # convolution only has to produce the in-cell offset, which starts at zero
        self.reg.weight.data[:] = 0.0
        self.reg.bias.data[:] = 0.0
        gr, ga = cfg.grid
        i, j = np.meshgrid(np.arange(gr), np.arange(ga), indexing="ij")
        self.anchor = np.stack([(i + 0.5) * cfg.cell_size[0],
                                (j + 0.5 - cfg.azimuth_center) * cfg.cell_size[1]]).astype(dtype)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        reg = self.reg(x)
        anchor = Tensor(np.broadcast_to(self.anchor, reg.shape).astype(reg.dtype))
        return DetectionMapPair(cls=sigmoid(self.cls(x)), reg=add(reg, anchor))


class CameraBranch(Module):
    def __init__(self, cfg, rng, dtype):
        self.encoder = Encoder(3, cfg, rng, dtype)
        self.decoder = CameraDecoder(self.encoder.channels, cfg, rng, dtype)


class RadarBranch(Module):
    def __init__(self, cfg, rng, dtype):
        self.encoder = Encoder(cfg.radar_in_channels, cfg, rng, dtype)
        self.decoder = RadarDecoder(self.encoder.channels, cfg, rng, dtype)


class FusionNet(Module):
    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.camera = CameraBranch(cfg, rng, dtype)
        self.radar = RadarBranch(cfg, rng, dtype)
        cin = self.camera.decoder.out_channels + self.radar.decoder.out_channels
        self.head = DetectionHead(cin, cfg, rng, dtype)

    def camera_encoder_forward(self, polar_img) -> list:
        polar_img = self._input(polar_img)
        _check_input(polar_img, 3, self.config.camera_input, "camera")
        return self.camera.encoder(polar_img)

    def camera_decoder_forward(self, feats) -> Tensor:
        return self.camera.decoder(feats)

    def radar_branch_forward(self, rd) -> Tensor:
        rd = self._input(rd)
        _check_input(rd, self.config.radar_in_channels, self.config.radar_input, "radar")
        return self.radar.decoder(self.radar.encoder(rd))

    def fuse_and_detect(self, cam_feat, rad_feat) -> DetectionMapPair:
        if cam_feat.shape[-2:] != rad_feat.shape[-2:] or cam_feat.shape[-2:] != self.config.grid:
            raise ShapeError(f"feature grids differ: {cam_feat.shape} vs {rad_feat.shape}")
        return self.head(concat_channels(cam_feat, rad_feat))

    def forward(self, polar_img, rd) -> DetectionMapPair:
        cam = self.camera_decoder_forward(self.camera_encoder_forward(polar_img))
        rad = self.radar_branch_forward(rd)
        return self.fuse_and_detect(cam, rad)

    def _input(self, x):
        if isinstance(x, Tensor):
            return x if x.dtype == self.dtype else Tensor(x.data.astype(self.dtype))
        return Tensor(np.asarray(x, dtype=self.dtype))


def build_network(cfg: NetworkConfig, dtype=np.float32) -> FusionNet:
    return FusionNet(cfg, dtype)


__all__ = [
    "NetworkConfig",
    "DetectionMapPair",
    "FusionNet",
    "build_network",
    "resample_matrix",
    "count_parameters",
]
