"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest
import yaml

from src.py_pacnn.core.config import Config, ModelConfig, SceneConfig
from src.py_pacnn.core.geometry import AnnotatedScene, CameraModel, generate_dataset
from src.py_pacnn.core.processor import PacnnPipeline


@pytest.fixture
def tiny_model_config():
    """Smallest smooth model: float64 softplus network with a few channels per block."""
    return ModelConfig(widths=[2, 2, 4, 4], perspective_widths=[2, 2], activation="softplus", dtype="float64")


@pytest.fixture
def sample_config(tiny_model_config, tmp_path):
    """Provide a fast configuration: 64x64 scenes, a tiny model and a few epochs."""
    return Config(
        logging={"level": "DEBUG", "file": str(tmp_path / "logs" / "test.log")},
        scene={"width": 64, "height": 64, "count_min": 8, "count_max": 20},
        model=tiny_model_config.model_dump(),
        train={
            "learning_rate": 1e-4,
            "epochs_phase1": 1,
            "epochs_phase2": 1,
            "crops_per_image": 0,
            "loss": {"lambda_dssim": 0.0},
        },
        scales={"density_scale": 1.0},
    )


@pytest.fixture
def camera():
    """Camera 40 m above the ground with the default person height."""
    return CameraModel(focal_length=500.0, camera_height=40.0)


@pytest.fixture
def scenes(sample_config):
    """Three seeded synthetic scenes."""
    return generate_dataset(sample_config.scene, seed=7, count=3)


@pytest.fixture
def make_scene():
    """Build an AnnotatedScene from a head list."""

    def _make(heads, width=32, height=32, scene_id="scene", **kwargs):
        return AnnotatedScene(id=scene_id, width=width, height=height, heads=np.asarray(heads, dtype=float), **kwargs)

    return _make


@pytest.fixture
def config_file(sample_config, tmp_path):
    """The sample configuration written as YAML."""
    path = tmp_path / "config.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(sample_config.model_dump(), f)
    return path


@pytest.fixture
def dataset_dir(sample_config, tmp_path):
    """A generated train/test dataset with GT maps."""
    pipeline = PacnnPipeline(sample_config)
    root = tmp_path / "data"
    pipeline.generate_data(root, n_train=2, n_test=2, seed=3)
    pipeline.generate_ground_truth(root / "train")
    return root


@pytest.fixture
def scene_config():
    """Default scene generator settings."""
    return SceneConfig()
