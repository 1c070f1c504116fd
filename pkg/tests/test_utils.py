"""Tests for the logging and worker-pool helpers."""

from loguru import logger

from src.py_pacnn.utils.logging import setup_logging
from src.py_pacnn.utils.parallel import ordered_map, worker_count


def test_worker_count_from_environment(monkeypatch):
    """Test that PACNN_THREADS sets the worker count, clamped to at least one."""
    monkeypatch.setenv("PACNN_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("PACNN_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("PACNN_THREADS", "many")
    assert worker_count() >= 1


def test_ordered_map_keeps_order(monkeypatch):
    """Test that results come back in input order for any thread count."""
    for threads in ("1", "4"):
        monkeypatch.setenv("PACNN_THREADS", threads)
        assert ordered_map(lambda x: x * x, range(20)) == [x * x for x in range(20)]
    assert ordered_map(str, []) == []


def test_setup_logging_writes_file(tmp_path):
    """Test that the log file receives debug records while the console level stays higher."""
    log_file = tmp_path / "logs" / "run.log"
    setup_logging(log_file=str(log_file), level="WARNING")
    logger.bind(name="Test").debug("debug line")
    logger.complete()
    assert log_file.exists()
    assert "debug line" in log_file.read_text()
    logger.remove()
