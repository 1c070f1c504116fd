"""Pipeline operations behind the command-line interface."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from ..utils.parallel import ordered_map
from .config import Config
from .diagnostics import run_suite
from .evaluation import CountMetrics, evaluate_scenes
from .exceptions import DegenerateDataError, InsufficientDataError
from .geometry import AnnotatedScene, generate_dataset
from .gt_maps import (
    PerspectiveProfile,
    build_perspective_profile,
    fit_dataset_perspective,
    render_density_map,
    render_profile_map,
)
from .model import PACNN, ModelParams
from .nn.gradcheck import GradCheckReport
from .storage import (
    DatasetStore,
    read_annotations,
    read_checkpoint,
    read_map,
    write_checkpoint,
    write_map,
    write_pgm,
    write_table,
)
from .trainer import (
    TrainReport,
    model_from_params,
    prepare_training_samples,
    run_ablation,
    train_phase1,
    train_phase2,
)

TRAIN_STREAM = 0
TEST_STREAM = 1


@dataclass
class TrainingResult:
    checkpoint_id: str
    phase1: TrainReport
    phase2: TrainReport


class PacnnPipeline:
    """Dataset generation, GT building, training, evaluation and export."""

    def __init__(self, config: Config):
        """Initialize the pipeline with a configuration."""
        self.config = config
        self.logger = logger.bind(name="Pipeline")

    # ------------------------------------------------------------------ data

    def generate_data(self, out_dir: Path, n_train: int, n_test: int, seed: int) -> dict[str, int]:
        """Write train/ and test/ synthetic datasets from one root seed."""
        counts = {}
        for split, n, stream in (("train", n_train, TRAIN_STREAM), ("test", n_test, TEST_STREAM)):
            if n <= 0:
                continue
            scenes = generate_dataset(self.config.scene, seed, n, stream=stream, prefix=split)
            DatasetStore(Path(out_dir) / split).write_scenes(scenes)
            counts[split] = n
        self.logger.info(f"Generated datasets in {out_dir}: {counts}")
        return counts

    def fit_profiles(
        self, scenes: list[AnnotatedScene]
    ) -> tuple[dict[str, PerspectiveProfile], PerspectiveProfile | None]:
        """Per-scene perspective profiles; scenes that cannot be fitted use a pooled dataset fit."""
        cfg = self.config.perspective

        def fit(scene: AnnotatedScene) -> PerspectiveProfile | None:
            try:
                return build_perspective_profile(scene, cfg)
            except (InsufficientDataError, DegenerateDataError) as e:
                self.logger.debug(f"Scene {scene.id}: {e}")
                return None

        fitted = ordered_map(fit, scenes)
        fallback = None
        if any(profile is None for profile in fitted):
            fallback = fit_dataset_perspective(scenes, cfg)
            n_missing = sum(profile is None for profile in fitted)
            self.logger.warning(f"{n_missing} scenes fall back to the dataset-level perspective fit")
        profiles = {s.id: (p if p is not None else fallback) for s, p in zip(scenes, fitted, strict=True)}
        return profiles, fallback

    def generate_ground_truth(self, dataset_dir: Path) -> dict:
        """Write density and perspective GT maps, the fits and a summary for a dataset."""
        store = DatasetStore(dataset_dir)
        scenes = store.read_scenes(with_images=False)
        profiles, fallback = self.fit_profiles(scenes)
        epsilon = self.config.perspective.epsilon

        def render(scene: AnnotatedScene) -> float:
            density = render_density_map(scene, self.config.density)
            perspective = render_profile_map(profiles[scene.id], scene.width, scene.height, epsilon)
            store.write_ground_truth(scene.id, density.values, perspective.values)
            return float(perspective.values.max())

        peaks = ordered_map(render, scenes)
        store.write_fits(profiles)
        summary = {
            "n_scenes": len(scenes),
            "source": self.config.perspective.source,
            "perspective_max": max(peaks) if peaks else None,
            "n_fallback": sum(profiles[s.id] is fallback for s in scenes) if fallback is not None else 0,
            "fallback_fit": fallback.to_dict() if fallback is not None else None,
        }
        store.write_summary(summary)
        self.logger.info(f"Ground truth written for {len(scenes)} scenes in {store.gt_dir}")
        return summary

    def fit_perspective(self, annotations: Path, out_dir: Path) -> dict[str, PerspectiveProfile]:
        """Fit every scene of an annotation file and write its perspective map."""
        scenes = [record.to_scene() for record in read_annotations(annotations)]
        profiles, _ = self.fit_profiles(scenes)
        for scene in scenes:
            values = render_profile_map(profiles[scene.id], scene.width, scene.height, self.config.perspective.epsilon)
            write_map(Path(out_dir) / f"{scene.id}.perspective.pacm", values.values)
        return profiles

    # ------------------------------------------------------------------ training

    def _training_samples(self, dataset_dir: Path):
        store = DatasetStore(dataset_dir)
        scenes = store.read_scenes()
        profiles = store.read_fits()
        scales = self.config.scales
        if scales.perspective_scale is None:
            scales = scales.model_copy(update={"perspective_scale": store.read_summary()["perspective_max"]})
        return prepare_training_samples(scenes, profiles, self.config, scales)

    def train(self, dataset_dir: Path, out_dir: Path) -> TrainingResult:
        """Phase 1 then phase 2; writes both checkpoints and the training log."""
        out_dir = Path(out_dir)
        samples = self._training_samples(dataset_dir)

        warm, report1 = train_phase1(samples, self.config)
        report1.checkpoint_id = write_checkpoint(out_dir / "phase1.pacp", warm)
        params, report2 = train_phase2(samples, self.config, warm, mode="pa")
        report2.checkpoint_id = write_checkpoint(out_dir / "model.pacp", params)

        write_table(out_dir / "train_log.jsonl", pd.concat([report1.to_frame(), report2.to_frame()], ignore_index=True))
        self.logger.info(f"Training finished; checkpoint {report2.checkpoint_id[:12]}")
        return TrainingResult(report2.checkpoint_id, report1, report2)

    def ablate(self, train_dir: Path, test_dir: Path, seeds: list[int], out: Path | None = None) -> pd.DataFrame:
        samples = self._training_samples(train_dir)
        table = run_ablation(samples, DatasetStore(test_dir).read_scenes(), self.config, seeds)
        if out is not None:
            write_table(out, table)
        return table

    # ------------------------------------------------------------------ inference

    def load_model(self, checkpoint: Path) -> tuple[PACNN, ModelParams]:
        params = read_checkpoint(checkpoint)
        return model_from_params(params, self.config), params

    def evaluate(
        self, checkpoint: Path, dataset_dir: Path, per_scene_out: Path | None = None
    ) -> CountMetrics:
        model, params = self.load_model(checkpoint)
        scenes = DatasetStore(dataset_dir).read_scenes()
        table = evaluate_scenes(
            model, scenes, self.config.eval.mode, self.config.eval.output, params.meta.get("density_scale", 1.0)
        )
        if per_scene_out is not None:
            write_table(per_scene_out, table)
        return CountMetrics.from_counts(table["predicted"].to_numpy(), table["gt_count"].to_numpy())

    def predict(
        self, checkpoint: Path, image_path: Path, out: Path | None = None, weights_out: Path | None = None
    ) -> float:
        """Whole-image count; optionally writes the density map and the final weight map."""
        model, params = self.load_model(checkpoint)
        image = read_map(image_path)[None]
        outputs = model.forward(image, self.config.eval.mode, cache=False)
        density_scale = params.meta.get("density_scale", 1.0)
        density = outputs.density(self.config.eval.output).values / density_scale
        if out is not None:
            write_map(out, density)
        if weights_out is not None:
            write_map(weights_out, outputs.w.values)
        return float(np.sum(density, dtype=np.float64))

    def export_heatmap(self, map_path: Path, out: Path) -> None:
        write_pgm(out, read_map(map_path))

    def grad_check(self, seed: int) -> dict[str, GradCheckReport]:
        return run_suite(seed)
