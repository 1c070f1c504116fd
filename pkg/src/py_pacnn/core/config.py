"""Configuration management for Py PACNN."""

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .geometry import CameraModel

# Conv-layer parameter count of VGG-16, the backbone the default learning rate was tuned for.
VGG16_CONV_PARAMS = 14_714_688
REFERENCE_LEARNING_RATE = 1e-6


def load_env_file(env_file_path: Path) -> None:
    """Load environment variables from .env file."""
    if env_file_path.exists():
        with open(env_file_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, value = line.split("=", 1)
                    os.environ[key.strip()] = value.strip()


def parse_key_value_file(path: Path) -> dict[str, Any]:
    """Parse a key=value file with dotted keys into a nested dictionary."""
    data: dict[str, Any] = {}
    with open(path, encoding="utf-8") as f:
        for number, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")

            key, value = line.split("=", 1)
            parts = [part.strip() for part in key.strip().split(".") if part.strip()]
            if not parts:
                raise ConfigError(f"{path}:{number}: empty key")

            node = data
            for part in parts[:-1]:
                child = node.setdefault(part, {})
                if not isinstance(child, dict):
                    raise ConfigError(f"{path}:{number}: '{part}' is both a value and a section")
                node = child
            node[parts[-1]] = yaml.safe_load(value.strip()) if value.strip() else None
    return data


def flatten_dict(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    """Flatten nested dictionaries into dotted keys."""
    flat: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_dict(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


class LoggingConfig(BaseModel):
    """Logging configuration settings."""

    level: str = Field(default="INFO", description="Logging level")
    file: str | None = Field(default=None, description="Log file path (defaults to logs/pacnn.log)")


class SceneConfig(BaseModel):
    """Synthetic crowd-scene generator settings."""

    width: int = Field(default=64, ge=0, description="Image width in pixels")
    height: int = Field(default=64, ge=0, description="Image height in pixels")
    count_min: int = Field(default=5, ge=0, description="Smallest head count per scene")
    count_max: int = Field(default=50, ge=0, description="Largest head count per scene")
    camera: CameraModel = Field(
        default_factory=lambda: CameraModel(focal_length=500.0, camera_height=40.0),
        description="Pinhole camera shared by every generated scene",
    )
    horizon_row: float = Field(
        default=-16.0, description="Image row of the horizon (negative: above the top edge)"
    )
    placement: Literal["uniform", "perspective"] = Field(
        default="perspective",
        description="Head row distribution: uniform over rows, or denser where people look smaller",
    )
    blob_scale: float = Field(default=2.0, gt=0, description="Blob radius per unit perspective value (k)")
    blob_intensity: float = Field(default=1.0, gt=0, description="Peak intensity added per head")
    noise_std: float = Field(default=0.02, ge=0, description="Std of additive background noise")


class DensityKernelConfig(BaseModel):
    """Gaussian kernel settings for ground-truth density maps."""

    knn_k: int = Field(default=3, ge=1, description="Neighbors used for the adaptive sigma")
    sigma_scale: float = Field(default=0.3, gt=0, description="sigma = sigma_scale * mean K-NN distance")
    fixed_sigma: float | None = Field(default=None, gt=0, description="Fixed sigma overriding the adaptive rule")
    truncation_radius_sigmas: float = Field(default=4.0, gt=0, description="Kernel truncation radius in sigmas")
    single_head_sigma: float | None = Field(
        default=None, gt=0, description="Sigma for a lone head (defaults to a quarter of the mean image side)"
    )


class FitOptions(BaseModel):
    """Damped least-squares options for the tanh perspective fit."""

    restarts: int = Field(default=8, ge=0, description="Jittered restarts on top of the data-driven start")
    jitter: float = Field(default=0.5, ge=0, description="Relative log-normal jitter applied to restarts")
    max_iterations: int = Field(default=2000, ge=10, description="Function-evaluation limit per start")
    tolerance: float = Field(default=1e-12, gt=0, description="ftol/xtol/gtol of the LM solver")
    seed: int = Field(default=0, description="Seed for restart jitter")


class PerspectiveConfig(BaseModel):
    """Ground-truth perspective map generation."""

    source: Literal["tanh", "linear", "camera"] = Field(default="tanh", description="Perspective GT model")
    knn_k: int = Field(default=3, ge=1, description="Neighbors averaged per head scale sample")
    bin_height: int | None = Field(default=None, ge=1, description="Row-bin height (defaults to height/32)")
    epsilon: float = Field(default=1e-3, gt=0, description="Lower clamp for rendered perspective values")
    fit: FitOptions = Field(default_factory=FitOptions, description="Tanh fit options")


class ModelConfig(BaseModel):
    """PACNN architecture hyperparameters."""

    in_channels: int = Field(default=1, ge=1, description="Image channels")
    widths: list[int] = Field(default=[16, 32, 64, 64], description="Backbone block widths")
    perspective_widths: list[int] = Field(default=[32, 32], description="Hidden widths of the perspective branch")
    activation: Literal["relu", "softplus"] = Field(default="relu", description="Hidden and head activation")
    dtype: Literal["float32", "float64"] = Field(default="float32", description="Parameter storage precision")
    pad_input: bool = Field(default=True, description="Zero-pad inputs to a multiple of 32")

    @model_validator(mode="after")
    def check_widths(self) -> "ModelConfig":
        """Backbone needs four block widths, perspective branch two hidden widths."""
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError("widths must list four positive block widths")
        if len(self.perspective_widths) != 2 or any(w < 1 for w in self.perspective_widths):
            raise ValueError("perspective_widths must list two positive widths")
        return self


class SSIMConfig(BaseModel):
    """Local structural-similarity window and constants."""

    window_size: int = Field(default=5, ge=1, description="Gaussian window side (odd)")
    gaussian_sigma: float = Field(default=1.0, gt=0, description="Gaussian window std")
    c1: float | None = Field(default=None, gt=0, description="C1 override; defaults to (k1 * L)^2")
    c2: float | None = Field(default=None, gt=0, description="C2 override; defaults to (k2 * L)^2")
    k1: float = Field(default=0.01, gt=0, description="Luminance constant factor")
    k2: float = Field(default=0.03, gt=0, description="Contrast constant factor")

    @model_validator(mode="after")
    def check_window(self) -> "SSIMConfig":
        if self.window_size % 2 == 0:
            raise ValueError("window_size must be odd")
        return self


class LossWeights(BaseModel):
    """Weights of the composite multi-task loss."""

    lambda_dssim: float = Field(default=0.001, ge=0, description="DSSIM weight inside every task loss")
    dssim_per_pixel: bool = Field(default=True, description="Multiply lambda_dssim by the map pixel count")
    perspective_weight: float = Field(default=1.0, ge=0, description="Weight of the final perspective loss")
    kappa: float = Field(default=0.1, ge=0, description="Weight of the 1/16 perspective sub-loss")
    lambda1: float = Field(default=0.1, ge=0, description="Weight of the 1/8 density sub-loss")
    lambda2: float = Field(default=0.1, ge=0, description="Weight of the 1/16 density sub-loss")
    lambda3: float = Field(default=0.1, ge=0, description="Weight of the 1/32 density sub-loss")


class ScaleConfig(BaseModel):
    """Scale normalization applied to GT maps before the loss."""

    density_scale: float = Field(default=100.0, gt=0, description="Density maps are multiplied by this")
    perspective_scale: float | None = Field(
        default=None, gt=0, description="Perspective maps are divided by this (defaults to the dataset GT max)"
    )


class TrainConfig(BaseModel):
    """Two-phase SGD training protocol."""

    learning_rate: float | None = Field(
        default=None, ge=0, description="SGD step (defaults to 1e-6 scaled by backbone / VGG-16 parameter count)"
    )
    momentum: float = Field(default=0.9, ge=0, lt=1, description="SGD momentum")
    epochs_phase1: int = Field(default=100, ge=0, description="Epochs of density-only training")
    epochs_phase2: int = Field(default=150, ge=0, description="Epochs of joint fine-tuning")
    batch_size: int = Field(default=1, ge=1, le=1, description="Images per step (only 1 is supported)")
    crops_per_image: int = Field(default=9, ge=0, description="Random quarter-size crops per training image")
    seed: int = Field(default=0, description="Seed for initialization, crops and shuffling")
    freeze_backbone: bool = Field(default=False, description="Freeze backbone parameters in phase 2")
    loss: LossWeights = Field(default_factory=LossWeights, description="Composite loss weights")

    def resolve_learning_rate(self, n_backbone_params: int) -> float:
        """Explicit learning rate, or the reference rate times backbone size / VGG-16 conv size."""
        if self.learning_rate is not None:
            return self.learning_rate
        return REFERENCE_LEARNING_RATE * n_backbone_params / VGG16_CONV_PARAMS


class EvalConfig(BaseModel):
    """Evaluation settings."""

    mode: Literal["pa", "average"] = Field(default="pa", description="Combination used at inference")
    output: Literal["d_e", "d_e1", "d_e2", "d_e3"] = Field(default="d_e", description="Density output to count")


class Config(BaseModel):
    """Main configuration class."""

    logging: LoggingConfig = Field(default_factory=LoggingConfig, description="Logging configuration")
    scene: SceneConfig = Field(default_factory=SceneConfig, description="Synthetic scene generation")
    density: DensityKernelConfig = Field(default_factory=DensityKernelConfig, description="Density GT kernels")
    perspective: PerspectiveConfig = Field(default_factory=PerspectiveConfig, description="Perspective GT")
    model: ModelConfig = Field(default_factory=ModelConfig, description="Network architecture")
    ssim: SSIMConfig = Field(default_factory=SSIMConfig, description="SSIM window")
    scales: ScaleConfig = Field(default_factory=ScaleConfig, description="Loss scale normalization")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Training protocol")
    eval: EvalConfig = Field(default_factory=EvalConfig, description="Evaluation settings")

    def __init__(self, **data):
        """Initialize configuration with .env support."""
        env_file = Path(".env")
        if env_file.exists():
            load_env_file(env_file)

        super().__init__(**data)

    @classmethod
    def from_file(cls, config_path: Path) -> "Config":
        """Load configuration from a YAML or key=value file."""
        config_path = Path(config_path)
        if not config_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

        if config_path.suffix.lower() in (".yaml", ".yml"):
            with open(config_path, encoding="utf-8") as f:
                config_data = yaml.safe_load(f) or {}
        else:
            config_data = parse_key_value_file(config_path)

        try:
            return cls(**config_data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration in {config_path}: {e}") from e

    def save_to_file(self, config_path: Path) -> None:
        """Save configuration as YAML or key=value, chosen by suffix."""
        config_path = Path(config_path)
        config_data = self.model_dump()

        with open(config_path, "w", encoding="utf-8") as f:
            if config_path.suffix.lower() in (".yaml", ".yml"):
                yaml.dump(config_data, f, default_flow_style=False, indent=2)
            else:
                for key, value in flatten_dict(config_data).items():
                    # scalars are dumped with a trailing document marker
                    rendered = yaml.safe_dump(value, default_flow_style=True).strip()
                    if rendered.endswith("..."):
                        rendered = rendered[:-3].strip()
                    f.write(f"{key}={rendered}\n")
