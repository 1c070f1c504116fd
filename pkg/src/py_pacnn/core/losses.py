"""Per-task MSE + DSSIM objective and the six-term composite loss."""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .config import LossWeights, SSIMConfig
from .exceptions import ConfigError, ShapeError
from .gt_maps import GroundTruthBundle, ValueMap
from .model import MultiScaleOutputs

# term name -> (output name, GT kind, GT factor)
LOSS_TERMS = {
    "p": ("p_e", "perspective", 8),
    "d": ("d_e", "density", 8),
    "ps": ("p_es", "perspective", 16),
    "d1": ("d_e1", "density", 8),
    "d2": ("d_e2", "density", 16),
    "d3": ("d_e3", "density", 32),
}


def _grid(value: ValueMap | np.ndarray) -> np.ndarray:
    array = value.values if isinstance(value, ValueMap) else value
    return np.asarray(array, dtype=np.float64)


def _check_pair(estimate: np.ndarray, target: np.ndarray) -> None:
    if estimate.shape != target.shape:
        raise ShapeError(f"estimate {estimate.shape} and target {target.shape} differ in size")


def mse_loss(estimate: ValueMap | np.ndarray, target: ValueMap | np.ndarray) -> tuple[float, np.ndarray]:
    """(1/2) * sum (e - g)^2 and its gradient e - g."""
    e, g = _grid(estimate), _grid(target)
    _check_pair(e, g)
    diff = e - g
    return float(0.5 * np.sum(diff**2)), diff


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian window."""
    offsets = np.arange(size) - (size - 1) / 2.0
    kernel_1d = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(kernel_1d, kernel_1d)
    return window / window.sum()


class _LocalFilter:
    """Gaussian local mean, renormalized over the in-bounds part of the window."""

    def __init__(self, shape: tuple[int, int], cfg: SSIMConfig):
        self.window = gaussian_window(cfg.window_size, cfg.gaussian_sigma)
        self.norm = correlate(np.ones(shape), self.window, mode="constant", cval=0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return correlate(x, self.window, mode="constant", cval=0.0) / self.norm

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        # the window is symmetric, so zero-padded correlation is self-adjoint
        return correlate(u / self.norm, self.window, mode="constant", cval=0.0)


def ssim_constants(target: np.ndarray, cfg: SSIMConfig) -> tuple[float, float]:
    """C1 = (k1 L)^2, C2 = (k2 L)^2 with L = max(target max, 1e-6), unless overridden."""
    dynamic_range = max(float(np.max(target)), 1e-6)
    c1 = cfg.c1 if cfg.c1 is not None else (cfg.k1 * dynamic_range) ** 2
    c2 = cfg.c2 if cfg.c2 is not None else (cfg.k2 * dynamic_range) ** 2
    return c1, c2


@dataclass
class _SSIMTerms:
    mu_x: np.ndarray
    mu_y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @property
    def ssim(self) -> np.ndarray:
        return self.a * self.b / (self.c * self.d)


def _ssim_terms(x: np.ndarray, y: np.ndarray, filt: _LocalFilter, c1: float, c2: float) -> _SSIMTerms:
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    return _SSIMTerms(
        mu_x=mu_x,
        mu_y=mu_y,
        a=2.0 * mu_x * mu_y + c1,
        b=2.0 * cov + c2,
        c=mu_x**2 + mu_y**2 + c1,
        d=var_x + var_y + c2,
    )


def ssim_map(estimate: ValueMap | np.ndarray, target: ValueMap | np.ndarray, cfg: SSIMConfig | None = None) -> ValueMap:
    """Per-pixel SSIM with Gaussian-weighted local statistics."""
    cfg = cfg or SSIMConfig()
    x, y = _grid(estimate), _grid(target)
    _check_pair(x, y)
    c1, c2 = ssim_constants(y, cfg)
    terms = _ssim_terms(x, y, _LocalFilter(x.shape, cfg), c1, c2)
    return ValueMap(terms.ssim)


def dssim_loss(
    estimate: ValueMap | np.ndarray, target: ValueMap | np.ndarray, cfg: SSIMConfig | None = None
) -> tuple[float, np.ndarray]:
    """1 - mean SSIM and its analytic gradient with respect to the estimate."""
    cfg = cfg or SSIMConfig()
    x, y = _grid(estimate), _grid(target)
    _check_pair(x, y)
    c1, c2 = ssim_constants(y, cfg)
    filt = _LocalFilter(x.shape, cfg)
    t = _ssim_terms(x, y, filt, c1, c2)
    s = t.ssim
    cd = t.c * t.d

    # dS / d(local mean of x), d(local mean of x^2), d(local mean of x*y)
    g_mu = 2.0 * t.mu_y * (t.b - t.a) / cd - 2.0 * t.mu_x * s / t.c + 2.0 * t.mu_x * s / t.d
    g_xx = -s / t.d
    g_xy = 2.0 * t.a / cd

    u = -1.0 / x.size
    grad = filt.adjoint(u * g_mu) + 2.0 * x * filt.adjoint(u * g_xx) + y * filt.adjoint(u * g_xy)
    return float(1.0 - s.mean()), grad


def task_loss(
    estimate: ValueMap | np.ndarray,
    target: ValueMap | np.ndarray,
    weights: LossWeights,
    cfg: SSIMConfig | None = None,
) -> tuple[float, np.ndarray]:
    """MSE + lambda * DSSIM for one (estimate, GT) pair."""
    value, grad = mse_loss(estimate, target)
    lam = weights.lambda_dssim * (_grid(target).size if weights.dssim_per_pixel else 1.0)
    if lam > 0:
        d_value, d_grad = dssim_loss(estimate, target, cfg)
        value += lam * d_value
        grad = grad + lam * d_grad
    return value, grad


@dataclass
class LossBreakdown:
    """Total loss, unweighted per-term values and gradients per model output."""

    total: float
    terms: dict[str, float] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def term_coefficients(weights: LossWeights) -> dict[str, float]:
    return {
        "p": weights.perspective_weight,
        "d": 1.0,
        "ps": weights.kappa,
        "d1": weights.lambda1,
        "d2": weights.lambda2,
        "d3": weights.lambda3,
    }


def composite_loss(
    outputs: MultiScaleOutputs,
    gts: GroundTruthBundle,
    weights: LossWeights,
    cfg: SSIMConfig | None = None,
) -> LossBreakdown:
    """L = w_P L_P + L_D + kappa L_Ps + lambda1 L_D1 + lambda2 L_D2 + lambda3 L_D3."""
    coefficients = term_coefficients(weights)
    breakdown = LossBreakdown(total=0.0)

    for term, (output_name, kind, factor) in LOSS_TERMS.items():
        maps = gts.density if kind == "density" else gts.perspective
        if factor not in maps:
            raise ConfigError(f"GT bundle lacks {kind} at 1/{factor} needed by loss term '{term}'")

        value, grad = task_loss(getattr(outputs, output_name), maps[factor], weights, cfg)
        breakdown.terms[term] = value
        coef = coefficients[term]
        breakdown.total += coef * value
        if coef != 0:
            breakdown.grads[output_name] = coef * grad

    return breakdown
