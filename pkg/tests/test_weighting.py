"""Tests for the perspective-aware weighting layer and the average combination."""

import numpy as np
import pytest

from src.py_pacnn.core.diagnostics import check_pa, pa_op
from src.py_pacnn.core.exceptions import ShapeError, StateError
from src.py_pacnn.core.nn.gradcheck import grad_check
from src.py_pacnn.core.weighting import (
    PACombineState,
    PAWeighting,
    PAWeightParams,
    combine_average,
    initial_beta,
    pa_combine_backward,
    pa_combine_forward,
    pa_weights,
)


@pytest.fixture
def maps():
    """Provide fine, coarse and perspective maps of one size."""
    rng = np.random.default_rng(0)
    return rng.uniform(0, 2, (4, 5)), rng.uniform(0, 2, (4, 5)), rng.uniform(0, 1, (4, 5))


def _state(d_fine, d_coarse, p, pw):
    _, w = pa_combine_forward(d_fine, d_coarse, p, pw)
    return PACombineState(d_fine, d_coarse, p, w, pw.alpha, pw.beta)


def _nearest(x):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def test_weights_at_center_are_one_half(maps):
    """Test that p equal to beta gives weights of 0.5 and the plain average."""
    d_fine, d_coarse, _ = maps
    pw = PAWeightParams(alpha=3.0, beta=0.4)
    d_out, w = pa_combine_forward(d_fine, d_coarse, np.full(d_fine.shape, 0.4), pw)
    np.testing.assert_allclose(w, 0.5)
    np.testing.assert_allclose(d_out, (d_fine + d_coarse) / 2)


def test_saturated_weights_select_fine_map(maps):
    """Test that a steep positive slope above beta selects the fine map."""
    d_fine, d_coarse, _ = maps
    d_out, w = pa_combine_forward(d_fine, d_coarse, np.full(d_fine.shape, 2.0), PAWeightParams(alpha=200.0, beta=1.0))
    np.testing.assert_allclose(w, 1.0)
    np.testing.assert_allclose(d_out, d_fine)


def test_log_three_gives_three_quarters(maps):
    """Test that p = ln 3 with unit slope weights the fine map by 3/4."""
    d_fine, d_coarse, _ = maps
    d_out, w = pa_combine_forward(d_fine, d_coarse, np.full(d_fine.shape, np.log(3.0)), PAWeightParams(1.0, 0.0))
    np.testing.assert_allclose(w, 0.75, rtol=1e-14)
    np.testing.assert_allclose(d_out, 0.75 * d_fine + 0.25 * d_coarse, rtol=1e-14)


def test_weights_lie_strictly_inside_unit_interval(maps):
    """Test that moderate inputs never give weights of exactly 0 or 1."""
    w = pa_weights(maps[2] * 10 - 5, PAWeightParams(alpha=2.0, beta=0.1))
    assert np.all((w > 0) & (w < 1))


@pytest.mark.parametrize("alpha", [0.3, 1.0, 6.0])
def test_weights_are_monotone_in_perspective(alpha):
    """Test that per column the weights rise with p for alpha > 0 and fall for alpha < 0."""
    rng = np.random.default_rng(11)
    rows = np.arange(16.0)[:, None]
    # perspective grows down every column, with a different profile per column
    p = 0.05 + rng.uniform(0.01, 0.1, (1, 6)) * rows + rng.uniform(0, 0.5, (1, 6))
    rising = pa_weights(p, PAWeightParams(alpha=alpha, beta=0.6))
    falling = pa_weights(p, PAWeightParams(alpha=-alpha, beta=0.6))
    assert np.all(np.diff(rising, axis=0) > 0)
    assert np.all(np.diff(falling, axis=0) < 0)

    scattered = rng.uniform(0, 2, (10, 6))
    w = pa_weights(scattered, PAWeightParams(alpha=alpha, beta=1.0))
    for j in range(scattered.shape[1]):
        order = np.argsort(scattered[:, j])
        assert np.all(np.diff(w[order, j]) >= 0)


def test_equal_maps_give_zero_parameter_gradients(maps):
    """Test that blending a map with itself has no gradient for p, alpha or beta."""
    d_fine, _, p = maps
    state = _state(d_fine, d_fine.copy(), p, PAWeightParams(1.5, 0.2))
    grads = pa_combine_backward(np.random.default_rng(1).normal(size=d_fine.shape), state)
    assert grads.alpha == 0.0
    assert grads.beta == 0.0
    assert np.all(grads.p == 0.0)


def test_zero_upstream_gives_zero_gradients(maps):
    """Test that a zero upstream gradient gives zero gradients everywhere."""
    state = _state(*maps, PAWeightParams(1.5, 0.2))
    grads = pa_combine_backward(np.zeros(maps[0].shape), state)
    assert grads.alpha == 0.0 and grads.beta == 0.0
    for g in (grads.d_fine, grads.d_coarse_up, grads.p):
        assert np.all(g == 0.0)


def test_gradients_match_finite_differences(maps):
    """Test that PA gradients for all five inputs match finite differences."""
    d_fine, d_coarse, p = maps
    inputs = {"d_fine": d_fine, "d_coarse": d_coarse, "p": p, "alpha": np.array([0.7]), "beta": np.array([0.3])}
    report = grad_check(pa_op(np.random.default_rng(2).normal(size=d_fine.shape)), inputs, step=1e-5)
    assert report.passed, report.summary()


def test_random_and_saturated_instances_pass():
    """Test that the built-in PA check suite passes on all ten instances."""
    reports = check_pa(seed=3)
    assert len(reports) == 10
    assert all(r.passed for r in reports), [r.summary() for r in reports]


def test_backward_without_state():
    """Test that backward without forward state raises StateError."""
    with pytest.raises(StateError):
        pa_combine_backward(np.zeros((2, 2)), None)
    with pytest.raises(StateError):
        PAWeighting("pa").backward(np.zeros((1, 2, 2)))


def test_size_mismatch():
    """Test that PA combination rejects maps of different sizes."""
    with pytest.raises(ShapeError):
        pa_combine_forward(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), PAWeightParams())


def test_layer_accumulates_parameter_gradients(maps):
    """Test that the layer accumulates the alpha and beta gradients of pa_combine_backward."""
    d_fine, d_coarse, p = (m[None] for m in maps)
    layer = PAWeighting("pa", PAWeightParams(alpha=0.8, beta=0.5), dtype="float64")
    out = layer.forward((d_fine, d_coarse, p))
    assert out.shape == d_fine.shape
    assert layer.last_weights.shape == d_fine.shape

    upstream = np.ones(d_fine.shape)
    grads = layer.backward(upstream)
    expected = pa_combine_backward(upstream, _state(d_fine, d_coarse, p, PAWeightParams(0.8, 0.5)))
    assert layer.alpha.grad[0] == pytest.approx(expected.alpha)
    assert layer.beta.grad[0] == pytest.approx(expected.beta)
    np.testing.assert_allclose(grads.p, expected.p)


def test_layer_parameters_round_trip():
    """Test that set_params and params agree and parameter ids are namespaced."""
    layer = PAWeighting("pa", dtype="float64")
    layer.set_params(PAWeightParams(alpha=-2.0, beta=0.75))
    assert layer.params == PAWeightParams(alpha=-2.0, beta=0.75)
    assert [p.id for p in layer.parameters()] == ["pa.alpha", "pa.beta"]


def test_average_of_zero_heads():
    """Test that averaging zero heads gives zero."""
    out = combine_average(np.zeros((8, 8)), np.zeros((4, 4)), np.zeros((2, 2)), _nearest)
    assert np.all(out == 0.0)


def test_average_of_only_finest_head():
    """Test that with empty coarse heads the average is half the finest head."""
    m = np.random.default_rng(0).uniform(size=(8, 8))
    out = combine_average(m, np.zeros((4, 4)), np.zeros((2, 2)), _nearest)
    np.testing.assert_allclose(out, m / 2)


def test_average_matches_scalar_evaluation():
    """Test that the average chain matches a per-pixel evaluation."""
    rng = np.random.default_rng(1)
    d1, d2, d3 = rng.uniform(size=(8, 8)), rng.uniform(size=(4, 4)), rng.uniform(size=(2, 2))
    middle, out = combine_average(d1, d2, d3, _nearest, return_middle=True)
    for i in range(8):
        for j in range(8):
            expected_middle = (d2[i // 2, j // 2] + d3[i // 4, j // 4]) / 2
            assert middle[i // 2, j // 2] == pytest.approx(expected_middle, abs=1e-12)
            assert out[i, j] == pytest.approx((d1[i, j] + expected_middle) / 2, abs=1e-12)


def test_average_size_mismatch():
    """Test that the average chain rejects heads of incompatible sizes."""
    with pytest.raises(ShapeError):
        combine_average(np.zeros((8, 8)), np.zeros((4, 4)), np.zeros((3, 3)), _nearest)


def test_initial_beta_is_mean_perspective():
    """Test that the initial sigmoid center is the mean GT perspective."""
    assert initial_beta(np.array([[0.2, 0.4], [0.6, 0.8]])) == pytest.approx(0.5)
