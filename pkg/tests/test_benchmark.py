import pytest

from polarfusion.benchmark import BenchmarkReport, benchmark, checkpoint_megabytes, time_preprocessing
from polarfusion.config import PipelineConfig
from polarfusion.network import build_network
from polarfusion.nn import count_parameters
from polarfusion.pipeline import Preprocessor, samples_from_frames
from polarfusion.serialization import save_checkpoint
from polarfusion.synthetic import generate_frames


@pytest.fixture(scope="module")
def setup():
    cfg = PipelineConfig()
    frames = generate_frames(cfg.scene_spec(), 4, cfg.bev, cfg.grid, cfg.radar_shape(), cfg.mimo_config())
    pre = Preprocessor(cfg, cfg.camera.model())
    return cfg, frames, pre, samples_from_frames(frames, pre)


def test_report_fields(setup, tmp_path):
    cfg, frames, pre, samples = setup
    model = build_network(cfg.network_config())
    rep = benchmark(model, samples, cfg.grid, preprocess_seconds=time_preprocessing(pre, frames))
    assert rep.n_params == count_parameters(model) and rep.params_millions == rep.n_params / 1e6
    assert rep.fps_mean > 0 and rep.fps_std >= 0 and rep.n_frames == 4
    assert rep.preprocess_ms > 0
    size = save_checkpoint(tmp_path / "m.pfn", model)
    assert rep.model_mb == pytest.approx(size / 1e6)
    assert checkpoint_megabytes(model, tmp_path / "m.pfn") == size / 1e6
    text = rep.format()
    assert "FPS" in text and "sigma" in text and "preproc" in text


def test_needs_two_frames(setup):
    cfg, _, _, samples = setup
    with pytest.raises(ValueError):
        benchmark(build_network(cfg.network_config()), samples[:1], cfg.grid)


def test_report_dict_round_trip():
    r = BenchmarkReport(1.0, 1000000, 10.0, 0.5, 4.0, 10)
    assert BenchmarkReport(**r.as_dict()) == r
    assert "preproc" not in r.format()
