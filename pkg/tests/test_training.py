"""Tests for augmentation, sample preparation, SGD and the two-phase training protocol."""

from pathlib import Path

import numpy as np
import pytest

from src.py_pacnn.core.config import Config, SceneConfig
from src.py_pacnn.core.evaluation import evaluate
from src.py_pacnn.core.exceptions import DivergenceError, InsufficientDataError
from src.py_pacnn.core.geometry import generate_dataset, generate_scene
from src.py_pacnn.core.gt_maps import camera_profile
from src.py_pacnn.core.model import PACNN
from src.py_pacnn.core.nn.tensor import LayerParam, Tensor
from src.py_pacnn.core.processor import PacnnPipeline
from src.py_pacnn.core.storage import encode_checkpoint
from src.py_pacnn.core.trainer import (
    SGD,
    Trainer,
    augment,
    crop_scene,
    model_from_params,
    prepare_training_samples,
    run_ablation,
    train_phase1,
    train_phase2,
)

ABLATION_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation.yaml"


def _profiles(scenes):
    return {s.id: camera_profile(s) for s in scenes}


@pytest.fixture
def samples(sample_config, scenes):
    """Provide whole-scene training samples with camera-profile perspective GT."""
    return prepare_training_samples(scenes, _profiles(scenes), sample_config)


def test_no_crops(scenes):
    """Test that zero crops per image gives no augmented scenes."""
    assert augment(scenes[0], 0, seed=1) == []


def test_quarter_size_crops(scenes):
    """Test that crops are a quarter of the image and remember their parent."""
    crops = augment(scenes[0], 4, seed=1)
    assert len(crops) == 4
    for crop in crops:
        assert (crop.width, crop.height) == (32, 32)
        assert crop.meta["parent"] == scenes[0].id
        assert crop.image.shape == (1, 32, 32)


def test_crops_are_seeded(scenes):
    """Test that the same seed gives the same crop origins."""
    first = [c.meta["origin"] for c in augment(scenes[0], 3, seed=5)]
    assert first == [c.meta["origin"] for c in augment(scenes[0], 3, seed=5)]


def test_small_scene_is_skipped(make_scene):
    """Test that scenes whose quarter is below the network stride are not cropped."""
    assert augment(make_scene([[1.0, 1.0]], width=48, height=48), 3, seed=0) == []


def test_crop_translates_heads_and_horizon():
    """Test that a crop keeps only its heads, shifted with the horizon."""
    scene = generate_scene(SceneConfig(count_min=30, count_max=30), seed=0)
    crop = crop_scene(scene, 10, 20, 32, 32, "crop")
    inside = (
        (scene.heads[:, 0] >= 10) & (scene.heads[:, 0] < 42) & (scene.heads[:, 1] >= 20) & (scene.heads[:, 1] < 52)
    )
    assert crop.count == int(inside.sum())
    np.testing.assert_allclose(crop.heads, scene.heads[inside] - [10, 20])
    assert crop.horizon_row == scene.horizon_row - 20


def test_crop_without_heads_is_valid(make_scene):
    """Test that a crop with no heads is still a valid scene."""
    scene = make_scene([[60.0, 60.0]], width=64, height=64)
    crop = crop_scene(scene, 0, 0, 32, 32, "empty")
    assert crop.count == 0


def test_whole_scenes_without_crops(samples, scenes):
    """Test that without crops every scene is one sample with scaled GT."""
    assert [s.scene.id for s in samples] == [s.id for s in scenes]
    for sample in samples:
        assert sample.gt.density[8].sum() == pytest.approx(sample.scene.count, abs=1e-6)
        assert sample.gt.perspective[8].max() <= 1.0 + 1e-12


def test_crops_get_their_own_ground_truth(sample_config, scenes):
    """Test that crops replace whole scenes and get GT at their own size."""
    config = sample_config.model_copy(deep=True)
    config.train.crops_per_image = 2
    samples = prepare_training_samples(scenes, _profiles(scenes), config)
    assert len(samples) == 2 * len(scenes)
    for sample in samples:
        assert sample.gt.density[8].shape == (4, 4)
        assert sample.gt.count == sample.scene.count


def test_crop_perspective_follows_parent_rows(sample_config, scenes):
    """Test that crop perspective GT evaluates the parent profile at the parent rows."""
    config = sample_config.model_copy(deep=True)
    config.train.crops_per_image = 1
    config.scales.perspective_scale = 1.0
    sample = prepare_training_samples(scenes[:1], _profiles(scenes[:1]), config)[0]
    y0 = sample.scene.meta["origin"][1]
    parent = camera_profile(scenes[0])
    expected = parent.evaluate(np.arange(y0, y0 + 32, dtype=float)).reshape(4, 8).mean(axis=1)
    np.testing.assert_allclose(sample.gt.perspective[8][:, 0], expected)


def test_missing_profile(sample_config, scenes):
    """Test that a scene without a perspective profile raises InsufficientDataError."""
    with pytest.raises(InsufficientDataError):
        prepare_training_samples(scenes, {}, sample_config)


def test_no_scenes(sample_config):
    """Test that an empty training set raises InsufficientDataError."""
    with pytest.raises(InsufficientDataError):
        prepare_training_samples([], {}, sample_config)


def test_sgd_momentum():
    """Test that SGD accumulates velocity as v = mu * v + g."""
    param = LayerParam("w", Tensor(np.array([1.0])))
    optimizer = SGD([param], learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        param.tensor.grad = np.array([1.0])
        optimizer.step()
    assert param.values[0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9)


def test_sgd_skips_frozen_parameters():
    """Test that SGD leaves non-learnable parameters unchanged."""
    param = LayerParam("w", Tensor(np.array([1.0])), learnable=False)
    param.tensor.grad = np.array([1.0])
    SGD([param], learning_rate=0.1).step()
    assert param.values[0] == 1.0


def test_epoch_zero_only_measures(sample_config, samples):
    """Test that a zero-epoch run records epoch 0 without touching parameters."""
    model = PACNN(sample_config.model, seed=0)
    before = model.state()
    report = Trainer(sample_config, model, "measure").run(samples, 0, "pa", sample_config.train.loss)
    assert [r.epoch for r in report.epochs] == [0]
    for key, value in model.state().arrays.items():
        np.testing.assert_array_equal(value, before.arrays[key])


def test_report_frame(sample_config, samples):
    """Test that the training report converts to a per-epoch frame."""
    _, report = train_phase1(samples, sample_config)
    frame = report.to_frame()
    assert frame["epoch"].tolist() == [0, 1]
    assert {"phase", "total", "mae", "L_d", "L_p"} <= set(frame.columns)
    assert report.initial.epoch == 0 and report.final.epoch == 1


def test_phase1_drops_perspective_terms(sample_config, samples):
    """Test that phase 1 optimizes only the density terms."""
    params, report = train_phase1(samples, sample_config)
    record = report.final
    assert record.total == pytest.approx(
        record.terms["d"] + sum(0.1 * record.terms[t] for t in ("d1", "d2", "d3")), rel=1e-9
    )
    assert params.meta["density_scale"] == 1.0


def test_zero_learning_rate_keeps_parameters(sample_config, samples):
    """Test that a zero learning rate leaves the seeded initialization unchanged."""
    config = sample_config.model_copy(deep=True)
    config.train.learning_rate = 0.0
    config.train.epochs_phase1 = 3
    params, _ = train_phase1(samples, config)
    fresh = PACNN(config.model, seed=config.train.seed)
    fresh_state = fresh.state().arrays
    for key in ("conv1_1.weight", "head1.bias", "up_pa2.weight"):
        np.testing.assert_array_equal(params.arrays[key], fresh_state[key])


def test_zero_epoch_fine_tuning_returns_warm_start(sample_config, samples):
    """Test that zero phase-2 epochs return the phase-1 parameters."""
    config = sample_config.model_copy(deep=True)
    config.train.epochs_phase2 = 0
    warm, _ = train_phase1(samples, config)
    params, report = train_phase2(samples, config, warm)
    assert len(report.epochs) == 1
    for key, value in warm.arrays.items():
        np.testing.assert_array_equal(params.arrays[key], value)
    assert params.meta == warm.meta


def test_training_is_deterministic(sample_config, samples):
    """Test that two runs with one seed give byte-identical checkpoints."""
    runs = []
    for _ in range(2):
        warm, _ = train_phase1(samples, sample_config)
        params, _ = train_phase2(samples, sample_config, warm)
        runs.append(encode_checkpoint(params))
    assert runs[0] == runs[1]


def test_frozen_backbone(sample_config, samples):
    """Test that a frozen backbone keeps its weights while the heads still train."""
    config = sample_config.model_copy(deep=True)
    config.train.freeze_backbone = True
    warm, _ = train_phase1(samples, config)
    params, _ = train_phase2(samples, config, warm)
    np.testing.assert_array_equal(params.arrays["conv1_1.weight"], warm.arrays["conv1_1.weight"])
    assert not np.array_equal(params.arrays["head1.weight"], warm.arrays["head1.weight"])


def test_non_finite_loss_aborts(sample_config, samples):
    """Test that a NaN loss raises DivergenceError naming the epoch and sample."""
    samples[0].scene.image = np.full_like(samples[0].scene.image, np.nan)
    with pytest.raises(DivergenceError) as info:
        train_phase1(samples, sample_config)
    assert info.value.report["epoch"] == 0
    assert info.value.report["sample"] == samples[0].scene.id


def test_ablation_table(sample_config):
    """Test that each ablation row matches a separate run of that seed and mode."""
    scenes = generate_dataset(sample_config.scene, seed=1, count=2)
    test_scenes = generate_dataset(sample_config.scene, seed=1, count=2, stream=1)
    samples = prepare_training_samples(scenes, _profiles(scenes), sample_config)
    table = run_ablation(samples, test_scenes, sample_config, seeds=[0, 1])
    assert table["seed"].tolist() == [0, 1]
    for column in ("mae_average", "mae_pa", "mse_pa", "mae_pa_d_e1", "mse_average_d_e3", "pa_wins"):
        assert column in table.columns
    assert (table["pa_wins"] == (table["mae_pa"] <= table["mae_average"])).all()
    assert (table.drop(columns=["seed", "pa_wins"]) >= 0).all().all()

    seeded = sample_config.model_copy(update={"train": sample_config.train.model_copy(update={"seed": 1})})
    warm, _ = train_phase1(samples, seeded)
    for mode in ("average", "pa"):
        params, _ = train_phase2(samples, seeded, warm, mode=mode)
        metrics = evaluate(model_from_params(params, seeded), test_scenes, mode, "d_e", 1.0)
        assert table.loc[1, f"mae_{mode}"] == pytest.approx(metrics.mae, rel=1e-12)
        assert table.loc[1, f"mse_{mode}"] == pytest.approx(metrics.mse, rel=1e-12)


@pytest.mark.slow
def test_overfits_a_single_scene(sample_config):
    """Test that phase 1 at least halves the count error on one repeated scene."""
    config = sample_config.model_copy(deep=True)
    config.scene.count_min = config.scene.count_max = 20
    config.train.learning_rate = 1e-3
    config.train.epochs_phase1 = 200
    scene = generate_scene(config.scene, seed=0)
    samples = prepare_training_samples([scene], _profiles([scene]), config)
    _, report = train_phase1(samples, config)
    assert report.final.mae <= 0.5 * report.initial.mae


@pytest.mark.slow
def test_perspective_aware_combination_beats_average_baseline(tmp_path):
    """Test that under the shipped ablation config PA matches or beats averaging in at least 4 of 5 seeds."""
    config = Config.from_file(ABLATION_CONFIG)
    config.logging.file = str(tmp_path / "ablation.log")
    pipeline = PacnnPipeline(config)
    pipeline.generate_data(tmp_path / "data", n_train=200, n_test=50, seed=0)
    pipeline.generate_ground_truth(tmp_path / "data" / "train")

    table = pipeline.ablate(tmp_path / "data" / "train", tmp_path / "data" / "test", seeds=[0, 1, 2, 3, 4])
    assert len(table) == 5
    assert int(table["pa_wins"].sum()) >= 4, table[["seed", "mae_average", "mae_pa"]].to_string()
