"""Gradient-check suite covering every layer, the PA layer, the losses and a tiny full model."""

import numpy as np
from loguru import logger

from .config import LossWeights, ModelConfig, SSIMConfig
from .gt_maps import GroundTruthBundle
from .losses import composite_loss, dssim_loss, mse_loss
from .model import PACNN
from .nn.gradcheck import GradCheckReport, grad_check, layer_inputs, layer_op
from .nn.layers import Conv2d, MaxPool2x2, Upsample2x
from .weighting import PACombineState, PAWeightParams, pa_combine_backward, pa_combine_forward

TINY_MODEL = ModelConfig(widths=[2, 2, 4, 4], perspective_widths=[2, 2], activation="softplus", dtype="float64")


def _layer_check(layer, x: np.ndarray, rng: np.random.Generator, **kwargs) -> GradCheckReport:
    upstream = rng.normal(size=layer.forward(x).shape)
    return grad_check(layer_op(layer, upstream), layer_inputs(layer, x), **kwargs)


def check_conv(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    cases = [(1, 5, 5, 2, 3), (2, 6, 7, 3, 3), (3, 4, 4, 2, 1)]
    reports = []
    for cin, h, w, cout, k in cases:
        layer = Conv2d("conv", cin, cout, k, rng=rng, dtype="float64", bias_init=0.1)
        reports.append(_layer_check(layer, rng.normal(size=(cin, h, w)), rng))
    return reports


def check_maxpool(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for shape in [(1, 4, 4), (2, 6, 8), (1, 5, 7)]:
        # a tiny step keeps every perturbation inside its window's argmax
        reports.append(_layer_check(MaxPool2x2("pool"), rng.normal(size=shape), rng, step=1e-6))
    return reports


def check_upsample(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for shape in [(1, 2, 2), (1, 3, 5), (2, 4, 3)]:
        layer = Upsample2x("up", channels=shape[0], dtype="float64")
        layer.weight.values = layer.weight.values + rng.normal(scale=0.1, size=layer.weight.tensor.shape)
        reports.append(_layer_check(layer, rng.normal(size=shape), rng))
    return reports


def pa_op(upstream: np.ndarray):
    """Scalar op sum(upstream * d_out) over (d_fine, d_coarse, p, alpha, beta)."""

    def op(values: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        pw = PAWeightParams(alpha=float(values["alpha"][0]), beta=float(values["beta"][0]))
        d_out, w = pa_combine_forward(values["d_fine"], values["d_coarse"], values["p"], pw)
        state = PACombineState(values["d_fine"], values["d_coarse"], values["p"], w, pw.alpha, pw.beta)
        grads = pa_combine_backward(upstream, state)
        return float(np.sum(upstream * d_out)), {
            "d_fine": grads.d_fine,
            "d_coarse": grads.d_coarse_up,
            "p": grads.p,
            "alpha": np.array([grads.alpha]),
            "beta": np.array([grads.beta]),
        }

    return op


def check_pa(seed: int = 0, instances: int = 10) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(instances):
        shape = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        # every third instance drives the sigmoid deep into saturation
        alpha = 25.0 if k % 3 == 2 else float(rng.normal(0.0, 2.0))
        inputs = {
            "d_fine": rng.uniform(0.0, 2.0, shape),
            "d_coarse": rng.uniform(0.0, 2.0, shape),
            "p": rng.uniform(0.0, 1.0, shape) + (1.0 if k % 3 == 2 else 0.0),
            "alpha": np.array([alpha]),
            "beta": np.array([float(rng.uniform(0.0, 1.0))]),
        }
        reports.append(grad_check(pa_op(rng.normal(size=shape)), inputs, step=1e-5))
    return reports


def loss_op(loss_fn, target: np.ndarray, **kwargs):
    """Scalar op over the estimate of a (value, grad) loss function."""

    def op(values: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        value, grad = loss_fn(values["estimate"], target, **kwargs)
        return value, {"estimate": grad}

    return op


def check_losses(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for shape in [(4, 4), (6, 9), (12, 10)]:
        target = rng.uniform(0.0, 1.0, shape)
        estimate = rng.uniform(0.0, 1.0, shape)
        reports.append(grad_check(loss_op(mse_loss, target), {"estimate": estimate}, tolerance=1e-6))
        reports.append(grad_check(loss_op(dssim_loss, target), {"estimate": estimate}, step=1e-5))
    return reports


def random_bundle(model: PACNN, size: int, rng: np.random.Generator) -> GroundTruthBundle:
    """Random positive GT maps matching the model's output grid."""
    return GroundTruthBundle(
        density={f: rng.uniform(0.0, 1.0, (size // f, size // f)) for f in (8, 16, 32)},
        perspective={f: rng.uniform(0.2, 1.0, (size // f, size // f)) for f in (8, 16)},
        count=0,
        density_scale=1.0,
        perspective_scale=1.0,
    )


def check_model(seed: int = 0, size: int = 32, mode: str = "pa") -> GradCheckReport:
    """d(composite loss)/d(theta) for every parameter of a tiny smooth model."""
    rng = np.random.default_rng(seed)
    model = PACNN(TINY_MODEL, seed=seed)
    model.set_pa_params(PAWeightParams(alpha=2.0, beta=0.3), PAWeightParams(alpha=-1.5, beta=0.2))
    image = rng.normal(size=(1, size, size))
    gts = random_bundle(model, size, rng)
    weights = LossWeights()
    ssim_cfg = SSIMConfig()
    params = {p.id: p for p in model.parameters()}

    def op(values: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        for pid, param in params.items():
            param.values = values[pid]
        model.zero_grad()
        loss = composite_loss(model.forward(image, mode), gts, weights, ssim_cfg)
        model.backward(loss.grads)
        return loss.total, {pid: param.grad.copy() for pid, param in params.items()}

    # max-pool windows must not switch winners under the perturbation
    return grad_check(op, {pid: p.values.copy() for pid, p in params.items()}, tolerance=1e-3, step=1e-6)


def run_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    """All checks by name."""
    results: dict[str, GradCheckReport] = {}
    groups = {
        "conv2d": check_conv,
        "maxpool2x2": check_maxpool,
        "upsample2x": check_upsample,
        "pa_combine": check_pa,
        "losses": check_losses,
    }
    for name, check in groups.items():
        for k, report in enumerate(check(seed)):
            results[f"{name}[{k}]"] = report
    results["model[pa]"] = check_model(seed, mode="pa")
    results["model[average]"] = check_model(seed, mode="average")

    failed = [name for name, report in results.items() if not report.passed]
    logger.info(f"Gradient checks: {len(results) - len(failed)}/{len(results)} passed")
    return results
