"""Tests for the gradient-check suite."""

from src.py_pacnn.core.diagnostics import check_conv, check_maxpool, check_upsample, run_suite


def test_layer_checks_pass():
    """Test that the conv, pool and upsample checks pass on three instances each."""
    for check in (check_conv, check_maxpool, check_upsample):
        reports = check(seed=2)
        assert len(reports) == 3
        assert all(r.passed for r in reports), [r.summary() for r in reports]


def test_full_suite_passes():
    """Test that the whole gradient-check suite passes and names every group."""
    results = run_suite(seed=0)
    assert {"model[pa]", "model[average]", "pa_combine[9]", "losses[5]"} <= set(results)
    failed = {name: report.summary() for name, report in results.items() if not report.passed}
    assert not failed
