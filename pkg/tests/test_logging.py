"""Tests for loguru sink configuration."""

from __future__ import annotations

from pathlib import Path

import pytest
from loguru import logger

from dla_guard.logging import setup_logging


def test_setup_logging_default(capsys: pytest.CaptureFixture[str]) -> None:
    """INFO messages reach stderr, DEBUG messages do not."""
    setup_logging()
    logger.debug("Hidden detail")
    logger.info("Stage summary")
    captured = capsys.readouterr()
    assert "Stage summary" in captured.err
    assert "Hidden detail" not in captured.err
    assert "Starting dla-guard" not in captured.err


def test_setup_logging_debug(capsys: pytest.CaptureFixture[str]) -> None:
    setup_logging(None, True)
    logger.debug("Search step")
    captured = capsys.readouterr()
    assert "Starting dla-guard" in captured.err
    assert "Search step" in captured.err


def test_setup_logging_file(tmp_path: Path) -> None:
    """The log file and its missing parent directories are created."""
    log_file = tmp_path / "logs" / "run.log"
    setup_logging(str(log_file))
    logger.info("Written to file")
    logger.remove()
    assert "Written to file" in log_file.read_text(encoding="utf-8")


def test_setup_logging_invalid_path(capsys: pytest.CaptureFixture[str], tmp_path: Path) -> None:
    """An unusable log path is reported and stderr logging still works."""
    setup_logging(str(tmp_path / "bad\x00dir" / "run.log"))
    captured = capsys.readouterr()
    assert "Failed to set up log file" in captured.err

    logger.info("Still logging")
    captured = capsys.readouterr()
    assert "Still logging" in captured.err
