"""
Tests for Logging Configuration.
"""

import logging
import logging.config
import warnings

import pytest

from repgan.utils.logging import PACKAGE_LOGGER, get_logger, logging_config, setup_logging


@pytest.fixture
def restore_logging():
    """Put the package logger back to a console-only configuration."""
    yield
    logging.config.dictConfig(logging_config("WARNING"))
    logging.captureWarnings(False)


class TestLoggingConfig:
    """Test cases for the dictConfig mapping."""

    def test_console_only(self):
        config = logging_config("DEBUG")
        assert set(config["handlers"]) == {"console"}
        assert config["loggers"][PACKAGE_LOGGER]["level"] == "DEBUG"
        assert config["loggers"][PACKAGE_LOGGER]["propagate"] is False

    def test_file_handler_is_shared(self, tmp_path):
        config = logging_config("INFO", str(tmp_path / "run.log"))
        assert config["handlers"]["file"]["class"] == "logging.handlers.RotatingFileHandler"
        for name in (PACKAGE_LOGGER, "py.warnings"):
            assert config["loggers"][name]["handlers"] == ["console", "file"]
        assert config["root"]["handlers"] == ["console", "file"]


class TestSetupLogging:
    """Test cases for setup_logging."""

    def test_records_reach_the_log_file(self, tmp_path, restore_logging):
        path = tmp_path / "logs" / "run.log"
        setup_logging("INFO", str(path))
        get_logger("cli").info("stage 1/4: aligner")
        get_logger("cli").debug("hidden")
        for handler in logging.getLogger(PACKAGE_LOGGER).handlers:
            handler.flush()
        text = path.read_text(encoding="utf-8")
        assert "repgan.cli - INFO" in text
        assert "hidden" not in text

    def test_warnings_are_captured(self, tmp_path, restore_logging):
        path = tmp_path / "run.log"
        setup_logging("INFO", str(path))
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.warn("overflow encountered in exp", RuntimeWarning)
        for handler in logging.getLogger("py.warnings").handlers:
            handler.flush()
        assert "overflow encountered in exp" in path.read_text(encoding="utf-8")

    def test_package_namespace(self):
        assert get_logger("cli").name == "repgan.cli"
