"""Camera + radar fusion detector on a polar range-azimuth grid, written on numpy."""
from .benchmark import BenchmarkReport, benchmark
from .config import ConfigError, PipelineConfig
from .evaluation import (BoxTemplate, Detection, GtObject, MetricsReport, compute_ap_ar, decode_detections,
                         evaluate, f1, match_detections, range_angle_errors)
from .geometry import BevGridSpec, CameraModel, PolarGridSpec, RgbImage, build_camera_model, camera_to_polar
from .loss import LossConfig, TargetMaps, detection_loss
from .network import DetectionMapPair, FusionNet, NetworkConfig, build_network
from .nn import count_parameters
from .radar import MimoConfig, RdTensor, mimo_reorganize, synth_rd_scene
from .serialization import load_checkpoint, save_checkpoint
from .synthetic import SyntheticSceneSpec, generate_synthetic_dataset

__version__ = "0.1.0"
