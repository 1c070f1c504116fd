"""Pinhole perspective model and synthetic crowd-scene generation.

Image rows grow downward. A camera at height C above flat ground looks at
people of height H; a person at depth z projects its head at
``y_head = f (C - H) / z`` and its feet at ``y_feet = f C / z``, both
measured downward from the horizon row. The focal length ``f`` is in
pixels per unit of the ratio f/z; only ratios enter the perspective value,
so ``f`` cancels out of every map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from ..utils.parallel import ordered_map
from .exceptions import ConfigError, DomainError

if TYPE_CHECKING:
    from .config import SceneConfig


class CameraModel(BaseModel):
    """Camera focal length and height, plus the assumed person height."""

    focal_length: float = Field(gt=0, description="Pixels per unit of f/z")
    camera_height: float = Field(gt=0, description="Camera height above the ground in meters (C)")
    person_height: float = Field(default=1.75, gt=0, description="Assumed pedestrian height in meters (H)")

    @property
    def clearance(self) -> float:
        """C - H, the denominator of the perspective value."""
        return self.camera_height - self.person_height

    def check_geometry(self) -> None:
        """The camera must be above the heads it looks at."""
        if self.person_height >= self.camera_height:
            raise DomainError(
                f"person_height ({self.person_height}) must be below camera_height ({self.camera_height})"
            )


@dataclass(frozen=True)
class ProjectedPerson:
    """Image-plane projection of one standing person."""

    y_head: float
    y_feet: float
    pixel_height: float
    depth: float


@dataclass
class AnnotatedScene:
    """An image with head-center annotations and optional synthetic ground truth."""

    id: str
    width: int
    height: int
    heads: np.ndarray
    image: np.ndarray | None = None
    roi: np.ndarray | None = None
    camera: CameraModel | None = None
    horizon_row: float | None = None
    per_head_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.heads = np.asarray(self.heads, dtype=np.float64).reshape(-1, 2)
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"Scene {self.id} has a zero-area image ({self.width}x{self.height})")

        inside = (
            (self.heads[:, 0] >= 0)
            & (self.heads[:, 0] < self.width)
            & (self.heads[:, 1] >= 0)
            & (self.heads[:, 1] < self.height)
        )
        if not np.all(inside):
            bad = self.heads[~inside][0]
            raise DomainError(f"Scene {self.id}: head ({bad[0]}, {bad[1]}) lies outside the image")

        if self.roi is not None:
            self.roi = np.asarray(self.roi, dtype=bool)
            if self.roi.shape != (self.height, self.width):
                raise DomainError(f"Scene {self.id}: ROI shape {self.roi.shape} != {(self.height, self.width)}")

        if self.per_head_scale is not None:
            self.per_head_scale = np.asarray(self.per_head_scale, dtype=np.float64)
            if self.per_head_scale.shape != (len(self.heads),):
                raise DomainError(f"Scene {self.id}: one head scale per head is required")

    @property
    def count(self) -> int:
        """Ground-truth head count."""
        return len(self.heads)


def project_person(camera: CameraModel, depth: float) -> ProjectedPerson:
    """Project a standing person at the given depth."""
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth}")

    f = camera.focal_length
    y_head = f * camera.clearance / depth
    y_feet = f * camera.camera_height / depth
    return ProjectedPerson(y_head=y_head, y_feet=y_feet, pixel_height=y_feet - y_head, depth=depth)


def perspective_value(camera: CameraModel, y_head: float | np.ndarray) -> float | np.ndarray:
    """Pixels per meter at a head observed y_head rows below the horizon."""
    camera.check_geometry()
    return y_head / camera.clearance


def depth_for_row(camera: CameraModel, y_head: float) -> float:
    """Invert the head projection: depth at which a head lands y_head rows below the horizon."""
    if not y_head > 0:
        raise DomainError(f"y_head must be below the horizon, got {y_head}")
    return camera.focal_length * camera.clearance / y_head


def _sample_rows(config: SceneConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Head rows, uniform or with density proportional to 1/p(row)^2."""
    if config.placement == "uniform":
        rows = rng.uniform(0.0, config.height, n)
    else:
        # ground area per pixel grows with depth squared
        near = 1.0 / (0.0 - config.horizon_row)
        far = 1.0 / (config.height - config.horizon_row)
        u = rng.uniform(0.0, 1.0, n)
        rows = config.horizon_row + 1.0 / (near - u * (near - far))
    return np.clip(rows, 0.0, np.nextafter(float(config.height), 0.0))


def render_blobs(width: int, height: int, heads: np.ndarray, radii: np.ndarray, intensity: float) -> np.ndarray:
    """Isotropic Gaussian blobs of the given radii centered on the heads."""
    canvas = np.zeros((height, width), dtype=np.float64)
    for (x, y), radius in zip(heads, radii, strict=True):
        reach = int(np.ceil(3.0 * radius)) + 1
        r0, r1 = max(0, int(y) - reach), min(height, int(y) + reach + 1)
        c0, c1 = max(0, int(x) - reach), min(width, int(x) + reach + 1)
        rr = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5 - y
        cc = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5 - x
        canvas[r0:r1, c0:c1] += intensity * np.exp(-(rr**2 + cc**2) / (2.0 * radius**2))
    return canvas


def generate_scene(config: SceneConfig, seed: int, scene_id: str | None = None) -> AnnotatedScene:
    """Generate one synthetic scene whose head sizes follow the camera's perspective."""
    if config.width * config.height == 0:
        raise ConfigError(f"Scene size {config.width}x{config.height} has zero area")
    if config.count_min > config.count_max:
        raise ConfigError(f"Empty count range [{config.count_min}, {config.count_max}]")
    if config.horizon_row >= 0:
        raise ConfigError(f"horizon_row must lie above the image (negative), got {config.horizon_row}")
    try:
        config.camera.check_geometry()
    except DomainError as e:
        raise ConfigError(str(e)) from e

    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.count_min, config.count_max + 1))
    rows = _sample_rows(config, rng, n)
    cols = np.clip(rng.uniform(0.0, config.width, n), 0.0, np.nextafter(float(config.width), 0.0))
    heads = np.stack([cols, rows], axis=1) if n else np.zeros((0, 2))

    scales = config.blob_scale * perspective_value(config.camera, rows - config.horizon_row)
    image = render_blobs(config.width, config.height, heads, scales, config.blob_intensity)
    if config.noise_std > 0:
        image += rng.normal(0.0, config.noise_std, image.shape)

    return AnnotatedScene(
        id=scene_id or f"scene-{seed}",
        width=config.width,
        height=config.height,
        heads=heads,
        image=image[None].astype(np.float32),
        camera=config.camera,
        horizon_row=config.horizon_row,
        per_head_scale=np.asarray(scales, dtype=np.float64),
    )


def scene_seeds(seed: int, count: int, stream: int = 0) -> list[int]:
    """Independent per-scene seeds derived from one root seed and a stream index."""
    if count == 0:
        return []
    states = np.random.SeedSequence([seed, stream]).generate_state(count)
    return [int(s) for s in states]


def generate_dataset(
    config: SceneConfig, seed: int, count: int, stream: int = 0, prefix: str = "scene"
) -> list[AnnotatedScene]:
    """Generate count scenes in parallel from per-scene derived seeds."""
    seeds = scene_seeds(seed, count, stream)
    logger.info(f"Generating {count} scenes (seed={seed}, stream={stream})")
    return ordered_map(
        lambda item: generate_scene(config, item[1], scene_id=f"{prefix}-{item[0]:05d}"),
        list(enumerate(seeds)),
    )
