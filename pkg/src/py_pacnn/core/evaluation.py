"""Counting metrics and whole-image evaluation."""

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from loguru import logger
from sklearn.metrics import mean_absolute_error, root_mean_squared_error

from ..utils.parallel import ordered_map
from .exceptions import InsufficientDataError, ShapeError
from .geometry import AnnotatedScene
from .gt_maps import ValueMap, downsample_mask, padded_size
from .model import PACNN

OUTPUT_FACTORS = {"d_e": 8, "d_e1": 8, "d_es": 16, "d_e2": 16, "d_e3": 32}


@dataclass(frozen=True)
class CountMetrics:
    """MAE and root-mean-square count error (reported as MSE, as is customary)."""

    mae: float
    mse: float
    n: int

    @classmethod
    def from_counts(cls, predicted: np.ndarray, actual: np.ndarray) -> "CountMetrics":
        predicted = np.asarray(predicted, dtype=np.float64)
        actual = np.asarray(actual, dtype=np.float64)
        if predicted.size == 0:
            raise InsufficientDataError("Cannot compute count metrics over an empty dataset")
        return cls(
            mae=float(mean_absolute_error(actual, predicted)),
            mse=float(root_mean_squared_error(actual, predicted)),
            n=int(predicted.size),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def count_from_density(
    density: ValueMap | np.ndarray, roi: np.ndarray | None = None, density_scale: float = 1.0
) -> float:
    """Sum of the map inside the ROI (whole map without one), undoing the loss scale."""
    values = np.asarray(density.values if isinstance(density, ValueMap) else density, dtype=np.float64)
    if roi is not None:
        roi = np.asarray(roi, dtype=bool)
        if roi.shape != values.shape:
            raise ShapeError(f"ROI shape {roi.shape} does not match map shape {values.shape}")
        values = np.where(roi, values, 0.0)
    return float(values.sum() / density_scale)


def roi_at_output(scene: AnnotatedScene, factor: int) -> np.ndarray | None:
    """Scene ROI padded like the network input and majority-downsampled to an output grid."""
    if scene.roi is None:
        return None
    width, height = padded_size(scene.width, scene.height)
    padded = np.zeros((height, width), dtype=bool)
    padded[: scene.height, : scene.width] = scene.roi
    return downsample_mask(padded, factor)


def predict_count(
    model: PACNN, scene: AnnotatedScene, mode: str = "pa", output: str = "d_e", density_scale: float = 1.0
) -> float:
    """Whole-image count from one density output (read-only forward)."""
    if scene.image is None:
        raise InsufficientDataError(f"Scene {scene.id} has no image")
    outputs = model.forward(scene.image, mode, cache=False)
    return count_from_density(outputs.density(output), roi_at_output(scene, OUTPUT_FACTORS[output]), density_scale)


def evaluate_scenes(
    model: PACNN,
    scenes: list[AnnotatedScene],
    mode: str = "pa",
    output: str = "d_e",
    density_scale: float = 1.0,
) -> pd.DataFrame:
    """Per-scene table of GT count, predicted count and error."""
    if not scenes:
        raise InsufficientDataError("Cannot evaluate an empty dataset")

    predicted = ordered_map(lambda scene: predict_count(model, scene, mode, output, density_scale), scenes)
    table = pd.DataFrame(
        {
            "id": [s.id for s in scenes],
            "gt_count": [float(s.count) for s in scenes],
            "predicted": predicted,
        }
    )
    table["error"] = table["predicted"] - table["gt_count"]
    return table


def evaluate(
    model: PACNN,
    scenes: list[AnnotatedScene],
    mode: str = "pa",
    output: str = "d_e",
    density_scale: float = 1.0,
) -> CountMetrics:
    """MAE and RMS count error of one density output over a dataset."""
    table = evaluate_scenes(model, scenes, mode, output, density_scale)
    metrics = CountMetrics.from_counts(table["predicted"].to_numpy(), table["gt_count"].to_numpy())
    logger.info(f"Evaluated {metrics.n} scenes ({mode}/{output}): MAE={metrics.mae:.4f} MSE={metrics.mse:.4f}")
    return metrics
