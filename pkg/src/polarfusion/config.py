"""Pipeline configuration stored as an INI file (sections of ``key = value``).

Tuples are written as space-separated values and ``auto`` stands for None.
Every run writes its resolved configuration next to its outputs.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import BoxTemplate
from .geometry import BevGridSpec, PolarGridSpec
from .loss import LossConfig
from .network import NetworkConfig
from .radar import MimoConfig
from .synthetic import CameraSetup, SyntheticSceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    seed: int = 0
    representation: str = "polar"  # or "cartesian"
    workers: int = 1


@dataclass
class Paths:
    dataset: str = "data"
    checkpoint: str = "model.pfn"
    output: str = "out"


@dataclass
class NetworkSettings:
    width: float = 1 / 8
    camera_input: tuple = (64, 64)
    radar_input: tuple = (64, 32)
    n_rx: int = 4
    n_tx: int = 3
    blocks: tuple = (3, 6, 6, 3)
    stage_channels: tuple = (32, 40, 64, 90, 124)
    decoder_channels: int = 128
    cam_channels: int = 128
    rad_channels: int = 128
    head_channels: tuple = (144, 96, 96, 96)


@dataclass
class MimoSettings:
    delta: int | None = None
    wrap: str = "modular"


@dataclass
class SyntheticSettings:
    n_frames: int = 40
    vehicles: tuple = (1, 3)
    range_bounds: tuple = (8.0, 40.0)
    azimuth_bounds: tuple = (-30.0, 30.0)
    min_separation: float = 6.0
    radar_amplitude: float = 1.0
    radar_noise: float = 0.05
    supersample: int = 2


@dataclass
class TrainSchedule:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    decay_every: int = 10
    batch_size: int = 4
    epochs: int = 10
    checkpoint_every: int = 1
    recalibrate_bn: bool = True


@dataclass
class SplitFractions:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15


@dataclass
class EvalSettings:
    iou_threshold: float = 0.5
    decode_threshold: float = 0.1  # keep peaks down to the lowest swept threshold
    box_length: float = 4.0
    box_width: float = 1.8


def _desk_grid():
    return PolarGridSpec(16, 16, 3.2, 5.0, 8.0)


def _desk_loss():
    # the w=1/8 network shares its head between the two outputs; a heavy regression weight
    # stalls the confidence maps well below 0.9 within a few hundred steps
    return LossConfig(alpha_reg=0.1)


# section name -> (attribute, type)
SECTIONS = {
    "run": ("run", RunSettings),
    "paths": ("paths", Paths),
    "network": ("network", NetworkSettings),
    "loss": ("loss", LossConfig),
    "bev": ("bev", BevGridSpec),
    "grid": ("grid", PolarGridSpec),
    "mimo": ("mimo", MimoSettings),
    "camera": ("camera", CameraSetup),
    "synthetic": ("synthetic", SyntheticSettings),
    "train": ("train", TrainSchedule),
    "split": ("split", SplitFractions),
    "eval": ("eval", EvalSettings),
}


@dataclass
class PipelineConfig:
    run: RunSettings = field(default_factory=RunSettings)
    paths: Paths = field(default_factory=Paths)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    loss: LossConfig = field(default_factory=_desk_loss)
    bev: BevGridSpec = field(default_factory=BevGridSpec)
    grid: PolarGridSpec = field(default_factory=_desk_grid)
    mimo: MimoSettings = field(default_factory=MimoSettings)
    camera: CameraSetup = field(default_factory=CameraSetup)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    split: SplitFractions = field(default_factory=SplitFractions)
    eval: EvalSettings = field(default_factory=EvalSettings)
    base_dir: Path = field(default=Path("."), compare=False)

    # -- derived objects ----------------------------------------------------

    def network_config(self) -> NetworkConfig:
        g = self.grid
        return NetworkConfig(**dataclasses.asdict(self.network), grid=(g.n_range, g.n_azimuth), seed=self.run.seed,
                             cell_size=(g.range_resolution, g.azimuth_resolution), azimuth_center=g.azimuth_center)

    def camera_grid(self) -> PolarGridSpec:
        """Camera polar raster: the detection grid's extent at the network's input size."""
        h, w = self.network.camera_input
        if h % self.grid.n_range:
            raise ConfigError(f"camera input height {h} is not a multiple of grid range bins {self.grid.n_range}")
        return self.grid.scaled(h // self.grid.n_range, w)

    def cartesian_grid(self) -> BevGridSpec:
        """BEV window resampled directly to the network input size (the Cartesian-input variant)."""
        return BevGridSpec.from_eta(self.bev.eta, self.network.camera_input)

    def mimo_config(self) -> MimoConfig:
        return MimoConfig(n_tx=self.network.n_tx, delta=self.mimo.delta, d_max=self.network.radar_input[1],
                          wrap=self.mimo.wrap)

    def radar_shape(self) -> tuple:
        r, d = self.network.radar_input
        return (r, d, self.network.n_rx)

    def scene_spec(self, seed: int | None = None) -> SyntheticSceneSpec:
        s = dataclasses.asdict(self.synthetic)
        s.pop("n_frames")
        return SyntheticSceneSpec(**s, camera=self.camera, seed=self.run.seed if seed is None else seed)

    def box_template(self) -> BoxTemplate:
        return BoxTemplate(self.eval.box_length, self.eval.box_width)

    def resolve(self, key: str) -> Path:
        p = Path(getattr(self.paths, key))
        return p if p.is_absolute() else self.base_dir / p

    # -- checks -------------------------------------------------------------

    def validate(self) -> "PipelineConfig":
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def _validate(self):
        total = self.split.train + self.split.val + self.split.test
        if abs(total - 1.0) > 1e-9 or min(self.split.train, self.split.val, self.split.test) < 0:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {total}")
        if self.run.representation not in ("polar", "cartesian"):
            raise ConfigError(f"representation must be 'polar' or 'cartesian', got {self.run.representation!r}")
        if self.run.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.network_config()
        cam = self.camera_grid()
        if (cam.n_range, cam.n_azimuth) != tuple(self.network.camera_input):
            raise ConfigError("camera polar raster does not match the camera input size")
        self.mimo_config()
        t = self.train
        if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if t.lr < 0 or not 0 < t.decay <= 1 or t.decay_every < 1 or t.batch_size < 1 or t.epochs < 0:
            raise ConfigError("invalid training schedule")
        if t.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not 0 < self.eval.decode_threshold < 1 or not 0 < self.eval.iou_threshold <= 1:
            raise ConfigError("decode and IoU thresholds must lie in (0, 1)")
        self.box_template()
        s = self.synthetic
        if s.n_frames < 0 or s.vehicles[0] < 0 or s.vehicles[1] < s.vehicles[0]:
            raise ConfigError("invalid synthetic frame or vehicle counts")
        if s.range_bounds[1] > self.grid.max_range:
            raise ConfigError("synthetic range bound exceeds the detection grid")

    # -- I/O ----------------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, (attr, _) in SECTIONS.items():
            obj = getattr(self, attr)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str, base_dir=".") -> "PipelineConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        default = cls()
        kwargs = {}
        for section, (attr, kind) in SECTIONS.items():
            base = getattr(default, attr)
            if section not in parser:
                kwargs[attr] = base
                continue
            names = {f.name for f in dataclasses.fields(base)}
            values = {}
            for key, raw in parser[section].items():
                if key not in names:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    values[key] = _parse(raw, getattr(base, key))
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from exc
            try:
                kwargs[attr] = dataclasses.replace(base, **values)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
        return cls(**kwargs, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_ini(p.read_text(), base_dir=p.parent)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        parts = raw.replace(",", " ").split()
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} values, got {len(parts)}")
        return tuple(_parse(p, d) for p, d in zip(parts, default))
    if raw.lower() == "auto":
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) or default is None:
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
