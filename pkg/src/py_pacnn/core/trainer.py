"""Two-phase SGD training, crop augmentation and the PA-vs-average ablation."""

import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from loguru import logger

from ..utils.parallel import ordered_map
from .config import Config, LossWeights, ScaleConfig
from .evaluation import count_from_density, evaluate
from .exceptions import DivergenceError, InsufficientDataError
from .geometry import AnnotatedScene, scene_seeds
from .gt_maps import (
    NETWORK_STRIDE,
    GroundTruthBundle,
    PerspectiveProfile,
    build_ground_truth,
    render_profile_map,
)
from .losses import LOSS_TERMS, composite_loss
from .model import PACNN, ModelParams
from .nn.tensor import LayerParam
from .weighting import PAWeightParams, initial_beta

CROP_STREAM = 1


# --------------------------------------------------------------------------- augmentation


def crop_scene(scene: AnnotatedScene, x0: int, y0: int, width: int, height: int, crop_id: str) -> AnnotatedScene:
    """Sub-scene with heads translated into crop coordinates and filtered to its bounds."""
    heads = scene.heads
    inside = (heads[:, 0] >= x0) & (heads[:, 0] < x0 + width) & (heads[:, 1] >= y0) & (heads[:, 1] < y0 + height)
    image = None if scene.image is None else scene.image[:, y0 : y0 + height, x0 : x0 + width].copy()
    roi = None if scene.roi is None else scene.roi[y0 : y0 + height, x0 : x0 + width].copy()

    return AnnotatedScene(
        id=crop_id,
        width=width,
        height=height,
        heads=heads[inside] - np.array([x0, y0], dtype=np.float64),
        image=image,
        roi=roi,
        camera=scene.camera,
        horizon_row=None if scene.horizon_row is None else scene.horizon_row - y0,
        per_head_scale=None if scene.per_head_scale is None else scene.per_head_scale[inside],
        meta={"parent": scene.id, "origin": (x0, y0)},
    )


def augment(scene: AnnotatedScene, n: int, seed: int) -> list[AnnotatedScene]:
    """n quarter-area crops (half of each side) at seeded random offsets."""
    if n <= 0:
        return []
    if scene.width < 2 * NETWORK_STRIDE or scene.height < 2 * NETWORK_STRIDE:
        logger.warning(
            f"Scene {scene.id} ({scene.width}x{scene.height}) is too small for {NETWORK_STRIDE}-pixel crops; skipping"
        )
        return []

    width, height = scene.width // 2, scene.height // 2
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, scene.width - width + 1, n)
    ys = rng.integers(0, scene.height - height + 1, n)
    return [
        crop_scene(scene, int(x), int(y), width, height, f"{scene.id}/crop{k}")
        for k, (x, y) in enumerate(zip(xs, ys, strict=True))
    ]


# --------------------------------------------------------------------------- samples


@dataclass
class TrainingSample:
    """An image with its scale-normalized multi-resolution GT."""

    scene: AnnotatedScene
    gt: GroundTruthBundle

    @property
    def image(self) -> np.ndarray:
        return self.scene.image


def resolve_scales(
    config: Config, scenes: list[AnnotatedScene], profiles: dict[str, PerspectiveProfile]
) -> ScaleConfig:
    """Fill in the perspective scale with the dataset-wide GT perspective maximum."""
    if config.scales.perspective_scale is not None:
        return config.scales
    peak = max(
        float(render_profile_map(profiles[s.id], 1, s.height, config.perspective.epsilon).values.max())
        for s in scenes
    )
    return config.scales.model_copy(update={"perspective_scale": peak})


def prepare_training_samples(
    scenes: list[AnnotatedScene],
    profiles: dict[str, PerspectiveProfile],
    config: Config,
    scales: ScaleConfig | None = None,
) -> list[TrainingSample]:
    """Crop every scene and build GT for each crop (the whole scene when no crops apply).

    Crop GT is regenerated from the crop's own heads; its perspective GT is
    the parent's profile shifted to the crop's first row.
    """
    if not scenes:
        raise InsufficientDataError("Training needs at least one scene")
    missing = [s.id for s in scenes if s.id not in profiles]
    if missing:
        raise InsufficientDataError(f"No perspective profile for scenes {missing[:5]}")
    scales = scales or resolve_scales(config, scenes, profiles)
    seeds = scene_seeds(config.train.seed, len(scenes), CROP_STREAM)

    def build(item: tuple[AnnotatedScene, int]) -> list[TrainingSample]:
        scene, seed = item
        crops = augment(scene, config.train.crops_per_image, seed)
        pieces = crops or [scene]
        samples = []
        for piece in pieces:
            profile = profiles[scene.id]
            if "origin" in piece.meta:
                profile = profile.shifted(piece.meta["origin"][1])
            gt = build_ground_truth(piece, profile, config.density, scales, config.perspective.epsilon)
            samples.append(TrainingSample(piece, gt))
        return samples

    samples = [s for group in ordered_map(build, list(zip(scenes, seeds, strict=True))) for s in group]
    logger.info(f"Prepared {len(samples)} training samples from {len(scenes)} scenes")
    return samples


# --------------------------------------------------------------------------- optimizer and reports


class SGD:
    """SGD with momentum: v = mu * v + g; theta -= lr * v."""

    def __init__(self, params: list[LayerParam], learning_rate: float, momentum: float = 0.9):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for param in self.params:
            if not param.learnable:
                continue
            velocity = self.velocity.get(param.id)
            velocity = param.grad.copy() if velocity is None else self.momentum * velocity + param.grad
            self.velocity[param.id] = velocity
            param.values = param.values - self.learning_rate * velocity


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: dict[str, float]
    mae: float


@dataclass
class TrainReport:
    """Per-epoch losses of one training phase."""

    phase: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoint_id: str | None = None
    wall_clock: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "phase": self.phase,
                "epoch": r.epoch,
                "total": r.total,
                "mae": r.mae,
                **{f"L_{k}": v for k, v in r.terms.items()},
            }
            for r in self.epochs
        ]
        return pd.DataFrame(rows)

    @property
    def initial(self) -> EpochRecord:
        return self.epochs[0]

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]


# --------------------------------------------------------------------------- training loop


class Trainer:
    """Runs one training phase over prepared samples."""

    def __init__(self, config: Config, model: PACNN, phase: str):
        """Initialize the trainer for a model and phase name."""
        self.config = config
        self.model = model
        self.phase = phase
        self.logger = logger.bind(name=f"Trainer.{phase}")

    def run(self, samples: list[TrainingSample], epochs: int, mode: str, weights: LossWeights) -> TrainReport:
        """Epoch 0 only measures; epochs 1..E update in a seeded shuffle order."""
        if not samples:
            raise InsufficientDataError("Training needs at least one sample")
        train_cfg = self.config.train
        learning_rate = train_cfg.resolve_learning_rate(self.model.n_backbone_params)
        optimizer = SGD(self.model.parameters(), learning_rate, train_cfg.momentum)
        report = TrainReport(phase=self.phase, seed=train_cfg.seed)
        started = time.perf_counter()
        self.logger.info(f"{epochs} epochs over {len(samples)} samples, mode={mode}, lr={learning_rate:.3g}")

        for epoch in range(epochs + 1):
            order = np.arange(len(samples))
            if epoch > 0:
                order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(samples))

            totals = []
            terms = {name: [] for name in LOSS_TERMS}
            errors = []
            for step, index in enumerate(order):
                sample = samples[index]
                outputs = self.model.forward(sample.image, mode, cache=epoch > 0)
                loss = composite_loss(outputs, sample.gt, weights, self.config.ssim)
                if not np.isfinite(loss.total):
                    raise DivergenceError(
                        f"Non-finite loss in {self.phase} epoch {epoch}",
                        report={"phase": self.phase, "epoch": epoch, "step": step, "sample": sample.scene.id,
                                "terms": loss.terms, "learning_rate": learning_rate},
                    )  # fmt: skip

                totals.append(loss.total)
                for name, value in loss.terms.items():
                    terms[name].append(value)
                predicted = count_from_density(outputs.d_e, density_scale=sample.gt.density_scale)
                errors.append(abs(predicted - sample.gt.count))

                if epoch > 0:
                    self.model.zero_grad()
                    self.model.backward(loss.grads)
                    optimizer.step()

            record = EpochRecord(
                epoch=epoch,
                total=float(np.mean(totals)),
                terms={name: float(np.mean(values)) for name, values in terms.items()},
                mae=float(np.mean(errors)),
            )
            report.epochs.append(record)
            breakdown = " ".join(f"{k}={v:.4g}" for k, v in record.terms.items())
            self.logger.info(f"epoch {epoch}/{epochs} loss={record.total:.6g} mae={record.mae:.4f} [{breakdown}]")

        report.wall_clock = time.perf_counter() - started
        return report


def _scale_meta(samples: list[TrainingSample]) -> dict[str, float]:
    gt = samples[0].gt
    return {"density_scale": gt.density_scale, "perspective_scale": gt.perspective_scale}


def init_pa_params(model: PACNN, sample: TrainingSample) -> None:
    """alpha = 1 and beta = mean GT perspective of the sample at each PA layer's resolution."""
    model.set_pa_params(
        inner=PAWeightParams(alpha=1.0, beta=initial_beta(sample.gt.perspective[16])),
        outer=PAWeightParams(alpha=1.0, beta=initial_beta(sample.gt.perspective[8])),
    )


def train_phase1(samples: list[TrainingSample], config: Config) -> tuple[ModelParams, TrainReport]:
    """Density-only training with average combination."""
    if not samples:
        raise InsufficientDataError("Training needs at least one sample")
    model = PACNN(config.model, seed=config.train.seed)
    init_pa_params(model, samples[0])
    weights = config.train.loss.model_copy(update={"perspective_weight": 0.0, "kappa": 0.0})

    report = Trainer(config, model, "phase1").run(samples, config.train.epochs_phase1, "average", weights)
    params = model.state()
    params.meta.update(_scale_meta(samples))
    return params, report


def train_phase2(
    samples: list[TrainingSample], config: Config, warm_start: ModelParams, mode: str = "pa"
) -> tuple[ModelParams, TrainReport]:
    """Joint fine-tuning on the full objective from a phase-1 warm start."""
    if not samples:
        raise InsufficientDataError("Training needs at least one sample")
    model = PACNN(config.model, seed=config.train.seed)
    model.load_state(warm_start)
    if config.train.freeze_backbone:
        model.set_backbone_trainable(False)
        model.logger.info("Backbone frozen for phase 2")

    report = Trainer(config, model, f"phase2.{mode}").run(samples, config.train.epochs_phase2, mode, config.train.loss)
    params = model.state()
    params.meta.update(warm_start.meta)
    return params, report


def model_from_params(params: ModelParams, config: Config) -> PACNN:
    model = PACNN(config.model, seed=config.train.seed)
    model.load_state(params)
    return model


def run_ablation(
    train_samples: list[TrainingSample],
    test_scenes: list[AnnotatedScene],
    config: Config,
    seeds: list[int],
) -> pd.DataFrame:
    """Average-combination baseline against the PA model with identical epochs per seed.

    Phase 1 is shared; phase 2 runs once per combination mode. Every
    density output is evaluated on the test scenes.
    """
    rows = []
    for seed in seeds:
        seeded = config.model_copy(update={"train": config.train.model_copy(update={"seed": seed})})
        warm, _ = train_phase1(train_samples, seeded)
        row = {"seed": seed}
        for mode in ("average", "pa"):
            params, _ = train_phase2(train_samples, seeded, warm, mode=mode)
            model = model_from_params(params, seeded)
            density_scale = params.meta.get("density_scale", 1.0)
            for output in ("d_e", "d_e1", "d_e2", "d_e3"):
                metrics = evaluate(model, test_scenes, mode, output, density_scale)
                suffix = mode if output == "d_e" else f"{mode}_{output}"
                row[f"mae_{suffix}"] = metrics.mae
                row[f"mse_{suffix}"] = metrics.mse
        row["pa_wins"] = row["mae_pa"] <= row["mae_average"]
        logger.info(f"Ablation seed {seed}: MAE average={row['mae_average']:.4f} pa={row['mae_pa']:.4f}")
        rows.append(row)
    return pd.DataFrame(rows)
