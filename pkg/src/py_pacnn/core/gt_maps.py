"""Ground-truth density and perspective maps.

Density maps place one unit-mass Gaussian per head. Perspective maps are
fitted per image: K-NN head distances give noisy scale samples, row means
smooth them, and a ``p = a * tanh(b * (row + c))`` profile (or a straight
line) turns them into a map that is constant along every row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from loguru import logger
from scipy.optimize import least_squares
from scipy.spatial import KDTree

from .config import DensityKernelConfig, FitOptions, PerspectiveConfig, ScaleConfig
from .exceptions import ConfigError, DegenerateDataError, InsufficientDataError, ShapeError
from .geometry import AnnotatedScene

NETWORK_STRIDE = 32
DENSITY_FACTORS = (8, 16, 32)
PERSPECTIVE_FACTORS = (8, 16)

# tanh(20) == 1.0 in double precision
SATURATED_ARGUMENT = 20.0


@dataclass
class ValueMap:
    """A 2D grid of reals (density, perspective or weight values)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"ValueMap needs a 2D grid, got shape {self.values.shape}")

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    def total(self) -> float:
        """Sum over all pixels, accumulated in double precision."""
        return float(np.sum(self.values, dtype=np.float64))


@dataclass(frozen=True)
class PerspectiveSample:
    """A sampled perspective value at an image row."""

    row: float
    value: float


@dataclass(frozen=True)
class TanhFitParams:
    """Parameters of p = a * tanh(b * (row + c)) and fit diagnostics."""

    a: float
    b: float
    c: float
    residual_rms: float = 0.0
    n_rows_used: int = 0
    converged: bool = True
    kind: str = field(default="tanh", init=False)

    def evaluate(self, rows: np.ndarray | float) -> np.ndarray:
        return self.a * np.tanh(self.b * (np.asarray(rows, dtype=np.float64) + self.c))

    def shifted(self, rows: float) -> TanhFitParams:
        """The same profile seen from a crop whose top row is `rows` below the parent's."""
        return replace(self, c=self.c + rows)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "residual_rms": self.residual_rms,
            "n_rows_used": self.n_rows_used,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class LinearProfile:
    """p = slope * row + intercept."""

    slope: float
    intercept: float
    residual_rms: float = 0.0
    n_rows_used: int = 0
    kind: str = field(default="linear", init=False)

    @property
    def converged(self) -> bool:
        return True

    def evaluate(self, rows: np.ndarray | float) -> np.ndarray:
        return self.slope * np.asarray(rows, dtype=np.float64) + self.intercept

    def shifted(self, rows: float) -> LinearProfile:
        return replace(self, intercept=self.intercept + self.slope * rows)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual_rms": self.residual_rms,
            "n_rows_used": self.n_rows_used,
        }


PerspectiveProfile = TanhFitParams | LinearProfile


def profile_from_dict(data: dict) -> PerspectiveProfile:
    """Rebuild a stored perspective profile."""
    kind = data.get("kind", "tanh")
    if kind == "tanh":
        return TanhFitParams(
            a=float(data["a"]),
            b=float(data["b"]),
            c=float(data["c"]),
            residual_rms=float(data.get("residual_rms", 0.0)),
            n_rows_used=int(data.get("n_rows_used", 0)),
            converged=bool(data.get("converged", True)),
        )
    if kind == "linear":
        return LinearProfile(
            slope=float(data["slope"]),
            intercept=float(data["intercept"]),
            residual_rms=float(data.get("residual_rms", 0.0)),
            n_rows_used=int(data.get("n_rows_used", 0)),
        )
    raise ConfigError(f"Unknown perspective profile kind: {kind}")


# --------------------------------------------------------------------------- density


def _adaptive_sigmas(heads: np.ndarray, cfg: DensityKernelConfig, width: int, height: int) -> np.ndarray:
    n = len(heads)
    if cfg.fixed_sigma is not None:
        return np.full(n, cfg.fixed_sigma)
    if n == 1:
        return np.array([cfg.single_head_sigma or (width + height) / 2.0 / 4.0])

    k = min(cfg.knn_k, n - 1)
    distances, _ = KDTree(heads).query(heads, k=k + 1)
    return cfg.sigma_scale * distances[:, 1:].reshape(n, k).mean(axis=1)


def render_density_map(scene: AnnotatedScene, cfg: DensityKernelConfig) -> ValueMap:
    """Sum of one truncated, renormalized Gaussian per head; total equals the head count."""
    density = np.zeros((scene.height, scene.width), dtype=np.float64)
    if scene.count == 0:
        return ValueMap(density)

    sigmas = _adaptive_sigmas(scene.heads, cfg, scene.width, scene.height)
    if not np.all(np.isfinite(sigmas)) or np.any(sigmas <= 0):
        raise ConfigError(f"Scene {scene.id}: non-positive kernel sigma (coincident heads with adaptive sigma?)")

    for (x, y), sigma in zip(scene.heads, sigmas, strict=True):
        radius = cfg.truncation_radius_sigmas * sigma
        r0, r1 = max(0, int(np.floor(y - radius))), min(scene.height, int(np.ceil(y + radius)) + 1)
        c0, c1 = max(0, int(np.floor(x - radius))), min(scene.width, int(np.ceil(x + radius)) + 1)
        dy = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5 - y
        dx = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5 - x
        sq = dx**2 + dy**2
        kernel = np.where(sq <= radius**2, np.exp(-sq / (2.0 * sigma**2)), 0.0)

        mass = kernel.sum()
        if mass > 0:
            density[r0:r1, c0:c1] += kernel / mass
        else:
            # kernel narrower than a pixel
            density[int(y), int(x)] += 1.0

    return ValueMap(density)


# --------------------------------------------------------------------------- perspective samples


def knn_head_scales(scene: AnnotatedScene, k: int) -> list[PerspectiveSample]:
    """Mean distance from every head to its k nearest other heads."""
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if scene.count < k + 1:
        raise InsufficientDataError(f"Scene {scene.id}: {scene.count} heads cannot give {k} neighbors each")

    distances, _ = KDTree(scene.heads).query(scene.heads, k=k + 1)
    scales = distances[:, 1:].reshape(scene.count, k).mean(axis=1)
    return [PerspectiveSample(row=float(y), value=float(s)) for y, s in zip(scene.heads[:, 1], scales, strict=True)]


def row_mean_samples(samples: list[PerspectiveSample], bin_height: int) -> list[PerspectiveSample]:
    """Average samples within horizontal bins; one output per non-empty bin at its center row."""
    if not samples:
        raise InsufficientDataError("No perspective samples to aggregate")
    if bin_height < 1:
        raise ConfigError(f"bin_height must be positive, got {bin_height}")

    rows = np.array([s.row for s in samples], dtype=np.float64)
    values = np.array([s.value for s in samples], dtype=np.float64)
    bins = np.floor(rows / bin_height).astype(np.int64)

    unique_bins, inverse = np.unique(bins, return_inverse=True)
    sums = np.bincount(inverse, weights=values)
    counts = np.bincount(inverse)

    centers = unique_bins * bin_height + bin_height / 2.0
    return [PerspectiveSample(row=float(r), value=float(v)) for r, v in zip(centers, sums / counts, strict=True)]


# --------------------------------------------------------------------------- fits


def _as_arrays(samples: list[PerspectiveSample]) -> tuple[np.ndarray, np.ndarray]:
    rows = np.array([s.row for s in samples], dtype=np.float64)
    values = np.array([s.value for s in samples], dtype=np.float64)
    return rows, values


def fit_linear(samples: list[PerspectiveSample]) -> tuple[float, float]:
    """Ordinary least-squares line p = slope * row + intercept."""
    if len(samples) < 2:
        raise InsufficientDataError(f"Linear fit needs at least 2 samples, got {len(samples)}")
    rows, values = _as_arrays(samples)
    if np.ptp(rows) == 0:
        raise DegenerateDataError("All samples share one row; slope is undefined")

    design = np.stack([rows, np.ones_like(rows)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, values, rcond=None)
    return float(slope), float(intercept)


def linear_profile(samples: list[PerspectiveSample]) -> LinearProfile:
    """fit_linear packaged as a perspective profile with its residual."""
    slope, intercept = fit_linear(samples)
    rows, values = _as_arrays(samples)
    residual = slope * rows + intercept - values
    return LinearProfile(
        slope=slope,
        intercept=intercept,
        residual_rms=float(np.sqrt(np.mean(residual**2))),
        n_rows_used=len(samples),
    )


def _tanh_residuals(params: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    a, b, c = params
    return a * np.tanh(b * (rows + c)) - values


def _tanh_jacobian(params: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    a, b, c = params
    shifted = rows + c
    t = np.tanh(b * shifted)
    sech2 = 1.0 - t**2
    return np.stack([t, a * sech2 * shifted, a * sech2 * b], axis=1)


def _tanh_starts(rows: np.ndarray, values: np.ndarray, opts: FitOptions) -> list[np.ndarray]:
    a0 = float(values.max())
    c0 = -float(rows.min())
    b0 = 2.0 / float(rows.max() + c0)
    starts = [np.array([a0, b0, c0])]

    # near-linear member of the family: a * tanh(b x) ~ a b x for small b x
    slope, intercept = fit_linear([PerspectiveSample(r, v) for r, v in zip(rows, values, strict=True)])
    if slope != 0:
        c_lin = intercept / slope
        reach = float(np.max(np.abs(rows + c_lin))) or 1.0
        b_lin = 1e-4 / reach
        starts.append(np.array([slope / b_lin, b_lin, c_lin]))

    rng = np.random.default_rng(opts.seed)
    span = float(np.ptp(rows))
    for _ in range(opts.restarts):
        jitter = rng.normal(0.0, opts.jitter, 3)
        starts.append(np.array([a0 * np.exp(jitter[0]), b0 * np.exp(jitter[1]), c0 + span * jitter[2]]))
    return starts


def fit_tanh(samples: list[PerspectiveSample], opts: FitOptions | None = None) -> TanhFitParams:
    """Damped least-squares fit of p = a * tanh(b * (row + c)) with multi-start initialization."""
    opts = opts or FitOptions()
    if len(samples) < 3:
        raise InsufficientDataError(f"Tanh fit needs at least 3 samples, got {len(samples)}")
    rows, values = _as_arrays(samples)
    if len(np.unique(rows)) < 2:
        raise DegenerateDataError("Tanh fit needs samples on at least 2 distinct rows")

    scale = float(np.max(np.abs(values)))
    if np.ptp(values) <= 1e-12 * scale:
        # flat profile: the optimum sits at full saturation
        b = 1.0 / max(float(np.ptp(rows)), 1.0)
        c = SATURATED_ARGUMENT / b - float(rows.min())
        params = np.array([float(values.mean()), b, c])
        residual = _tanh_residuals(params, rows, values)
        logger.debug(f"Flat perspective samples; saturated fit a={params[0]:.6g}")
        return TanhFitParams(
            a=params[0],
            b=params[1],
            c=params[2],
            residual_rms=float(np.sqrt(np.mean(residual**2))),
            n_rows_used=len(samples),
        )

    best = None
    for start in _tanh_starts(rows, values, opts):
        try:
            result = least_squares(
                _tanh_residuals,
                start,
                jac=_tanh_jacobian,
                args=(rows, values),
                method="lm",
                x_scale="jac",
                ftol=opts.tolerance,
                xtol=opts.tolerance,
                gtol=opts.tolerance,
                max_nfev=opts.max_iterations,
            )
        except (ValueError, FloatingPointError) as e:
            logger.debug(f"Tanh fit start {start} failed: {e}")
            continue
        if not np.all(np.isfinite(result.x)) or not np.isfinite(result.cost):
            continue
        if best is None or result.cost < best.cost:
            best = result

    if best is None:
        raise InsufficientDataError("Tanh fit failed from every start")

    a, b, c = (float(v) for v in best.x)
    if b < 0:
        a, b = -a, -b

    fit = TanhFitParams(
        a=a,
        b=b,
        c=c,
        residual_rms=float(np.sqrt(np.mean(best.fun**2))),
        n_rows_used=len(samples),
        converged=bool(best.status > 0),
    )
    if not fit.converged:
        logger.warning(f"Tanh fit did not converge in {opts.max_iterations} evaluations; keeping best-so-far")
    if fit.a <= 0:
        logger.warning(f"Tanh fit decreases toward the image bottom (a={fit.a:.4g})")
    logger.debug(f"Tanh fit a={fit.a:.6g} b={fit.b:.6g} c={fit.c:.6g} rms={fit.residual_rms:.3g}")
    return fit


# --------------------------------------------------------------------------- maps


def render_profile_map(profile: PerspectiveProfile, width: int, height: int, epsilon: float = 1e-3) -> ValueMap:
    """Row-constant perspective map, clamped below at epsilon."""
    if not profile.converged:
        logger.warning("Rendering a perspective map from a non-converged fit")
    column = np.maximum(profile.evaluate(np.arange(height, dtype=np.float64)), epsilon)
    return ValueMap(np.repeat(column[:, None], width, axis=1))


def render_perspective_map(fit: TanhFitParams, width: int, height: int, epsilon: float = 1e-3) -> ValueMap:
    """Perspective map a * tanh(b * (row + c)) at every pixel of each row."""
    return render_profile_map(fit, width, height, epsilon)


def camera_profile(scene: AnnotatedScene) -> LinearProfile:
    """Exact perspective profile of a synthetic scene: (row - horizon) / (C - H)."""
    if scene.camera is None or scene.horizon_row is None:
        raise InsufficientDataError(f"Scene {scene.id} carries no camera")
    scene.camera.check_geometry()
    clearance = scene.camera.clearance
    return LinearProfile(slope=1.0 / clearance, intercept=-scene.horizon_row / clearance)


def default_bin_height(height: int) -> int:
    return max(1, height // 32)


def perspective_samples(scene: AnnotatedScene, cfg: PerspectiveConfig) -> list[PerspectiveSample]:
    """K-NN head scales aggregated into row means."""
    samples = knn_head_scales(scene, cfg.knn_k)
    return row_mean_samples(samples, cfg.bin_height or default_bin_height(scene.height))


def build_perspective_profile(scene: AnnotatedScene, cfg: PerspectiveConfig) -> PerspectiveProfile:
    """Fit the configured perspective profile for one scene."""
    if cfg.source == "camera":
        return camera_profile(scene)

    samples = perspective_samples(scene, cfg)
    if cfg.source == "linear":
        return linear_profile(samples)
    return fit_tanh(samples, cfg.fit)


def fit_dataset_perspective(scenes: list[AnnotatedScene], cfg: PerspectiveConfig) -> PerspectiveProfile:
    """One profile from the samples of all scenes pooled together."""
    pooled: list[PerspectiveSample] = []
    height = max((s.height for s in scenes), default=1)
    for scene in scenes:
        if scene.count >= cfg.knn_k + 1:
            pooled.extend(knn_head_scales(scene, cfg.knn_k))
    if not pooled:
        raise InsufficientDataError("No scene has enough heads for a pooled perspective fit")

    means = row_mean_samples(pooled, cfg.bin_height or default_bin_height(height))
    if cfg.source == "linear":
        return linear_profile(means)
    return fit_tanh(means, cfg.fit)


# --------------------------------------------------------------------------- resolution changes


def _block_reduce(values: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad to a multiple of factor, return block sums and in-bounds pixel counts."""
    height, width = values.shape
    padded_h = -(-height // factor) * factor
    padded_w = -(-width // factor) * factor

    padded = np.zeros((padded_h, padded_w), dtype=np.float64)
    padded[:height, :width] = values
    inside = np.zeros((padded_h, padded_w), dtype=np.float64)
    inside[:height, :width] = 1.0

    shape = (padded_h // factor, factor, padded_w // factor, factor)
    return padded.reshape(shape).sum(axis=(1, 3)), inside.reshape(shape).sum(axis=(1, 3))


def downsample_map(value_map: ValueMap, factor: int, mode: str = "sum") -> ValueMap:
    """Block-reduce a map by an integer factor.

    Sizes that are not multiples of the factor are zero-padded on the bottom
    and right. ``sum`` keeps the total mass (density maps); ``mean`` averages
    the in-bounds pixels of each block (perspective maps).
    """
    if factor < 1:
        raise ConfigError(f"Downsampling factor must be positive, got {factor}")
    if mode not in ("sum", "mean"):
        raise ConfigError(f"Unknown downsampling mode: {mode}")

    sums, counts = _block_reduce(np.asarray(value_map.values, dtype=np.float64), factor)
    if mode == "sum":
        return ValueMap(sums)
    return ValueMap(sums / counts)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Majority-rule downsampling of a binary ROI mask."""
    sums, counts = _block_reduce(np.asarray(mask, dtype=np.float64), factor)
    return sums / counts >= 0.5


def padded_size(width: int, height: int, stride: int = NETWORK_STRIDE) -> tuple[int, int]:
    """Smallest (width, height) at least as large and divisible by stride."""
    return -(-width // stride) * stride, -(-height // stride) * stride


# --------------------------------------------------------------------------- training bundle


@dataclass
class GroundTruthBundle:
    """Scale-normalized GT maps at every supervised resolution."""

    density: dict[int, np.ndarray]
    perspective: dict[int, np.ndarray]
    count: int
    density_scale: float
    perspective_scale: float


def build_ground_truth(
    scene: AnnotatedScene,
    profile: PerspectiveProfile,
    density_cfg: DensityKernelConfig,
    scales: ScaleConfig,
    epsilon: float = 1e-3,
) -> GroundTruthBundle:
    """Density GT at 1/8, 1/16, 1/32 and perspective GT at 1/8, 1/16 of the padded scene."""
    if scales.perspective_scale is None:
        raise ConfigError("perspective_scale must be resolved before building GT bundles")

    width, height = padded_size(scene.width, scene.height)
    density = np.zeros((height, width), dtype=np.float64)
    density[: scene.height, : scene.width] = render_density_map(scene, density_cfg).values
    perspective = render_profile_map(profile, width, height, epsilon)

    return GroundTruthBundle(
        density={
            f: downsample_map(ValueMap(density), f, "sum").values * scales.density_scale for f in DENSITY_FACTORS
        },
        perspective={
            f: downsample_map(perspective, f, "mean").values / scales.perspective_scale for f in PERSPECTIVE_FACTORS
        },
        count=scene.count,
        density_scale=scales.density_scale,
        perspective_scale=scales.perspective_scale,
    )
