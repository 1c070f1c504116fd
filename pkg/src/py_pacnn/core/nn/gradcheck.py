"""Central finite-difference gradient checking."""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from .layers import Layer

# op(inputs) -> (scalar value, {name: analytic gradient})
GradOp = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    """Maximum relative error per checked input."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        if not self.errors:
            return 0.0
        values = np.array(list(self.errors.values()))
        return float(np.inf) if not np.all(np.isfinite(values)) else float(values.max())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def summary(self) -> str:
        worst = max(self.errors, key=lambda k: np.nan_to_num(self.errors[k], nan=np.inf), default="-")
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_error:.3e} (worst: {worst}, tol={self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12); nan when either side is non-finite."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("nan")
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(
    op: GradOp,
    inputs: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare op's analytic gradients with central differences.

    The step for each input is ``step`` times the input's RMS (``step``
    itself for all-zero inputs). With ``max_entries`` only a seeded random
    subset of each input's entries is perturbed.
    """
    inputs = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    _, analytic = op({name: value.copy() for name, value in inputs.items()})
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    for name, value in inputs.items():
        rms = float(np.sqrt(np.mean(value**2))) if value.size else 0.0
        h = step * rms if rms > 0 else step
        flat_indices = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_indices = np.sort(rng.choice(value.size, max_entries, replace=False))

        numeric = np.zeros(len(flat_indices))
        for k, flat in enumerate(flat_indices):
            index = np.unravel_index(flat, value.shape)
            perturbed = {n: v.copy() for n, v in inputs.items()}
            perturbed[name][index] = value[index] + h
            plus, _ = op(perturbed)
            perturbed[name][index] = value[index] - h
            minus, _ = op(perturbed)
            numeric[k] = (plus - minus) / (2.0 * h)

        grad = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64).ravel()
        report.errors[name] = relative_error(grad[flat_indices], numeric)

    logger.debug(f"Gradient check: {report.summary()}")
    return report


def layer_op(layer: Layer, upstream: np.ndarray) -> GradOp:
    """Wrap a layer as a scalar op: sum(forward(input) * upstream).

    Inputs are ``"input"`` plus the layer's parameter ids.
    """
    params = {p.id: p for p in layer.parameters()}

    def op(values: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        for pid, param in params.items():
            if pid in values:
                param.values = values[pid]
            param.tensor.zero_grad()
        y = layer.forward(values["input"])
        value = float(np.sum(np.asarray(y, dtype=np.float64) * upstream))
        grads = {"input": layer.backward(upstream)}
        grads.update({pid: param.grad.copy() for pid, param in params.items()})
        return value, grads

    return op


def layer_inputs(layer: Layer, x: np.ndarray) -> dict[str, np.ndarray]:
    """Inputs dict for layer_op: the input plus current parameter values."""
    inputs = {"input": x}
    inputs.update({p.id: p.values.copy() for p in layer.parameters()})
    return inputs
