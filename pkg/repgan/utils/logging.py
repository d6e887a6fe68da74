"""
Logging Configuration.

This module configures logging for the ``repgan`` command line. Package
records go to stderr (stdout carries the flat metric and summary output)
and optionally to a rotating file. Python warnings, such as numpy
overflow warnings raised just before a divergence, are captured into the
same handlers.
"""

import logging
import logging.config
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

PACKAGE_LOGGER = "repgan"
QUIET_LOGGERS = ("nltk", "numba", "matplotlib", "sklearn")
LOG_FILE_MAX_BYTES = 10 * 1024 * 1024
LOG_FILE_BACKUPS = 5


def logging_config(log_level: str = "INFO", log_file: Optional[str] = None) -> Dict[str, Any]:
    """
    Build the ``dictConfig`` mapping.

    Args:
        log_level: Level of the package logger and its handlers
        log_file: Optional rotating log file

    Returns:
        Configuration accepted by :func:`logging.config.dictConfig`
    """
    handlers: List[str] = ["console"]
    config: Dict[str, Any] = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "console": {"format": "%(levelname)s - %(name)s - %(message)s"},
            "file": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s",
                "datefmt": "%Y-%m-%d %H:%M:%S",
            },
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "level": log_level,
                "formatter": "console",
                "stream": sys.stderr,
            },
        },
        "loggers": {
            PACKAGE_LOGGER: {"level": log_level, "handlers": handlers, "propagate": False},
            "py.warnings": {"level": "WARNING", "handlers": handlers, "propagate": False},
        },
        "root": {"level": "WARNING", "handlers": handlers},
    }
    if log_file:
        config["handlers"]["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": log_level,
            "formatter": "file",
            "filename": log_file,
            "maxBytes": LOG_FILE_MAX_BYTES,
            "backupCount": LOG_FILE_BACKUPS,
            "encoding": "utf-8",
        }
        handlers.append("file")
    return config


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Set up logging configuration.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional log file path; parent directories are created
    """
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    logging.config.dictConfig(logging_config(log_level, log_file))
    logging.captureWarnings(True)
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)


def get_logger(name: str) -> logging.Logger:
    """Logger under the package namespace, e.g. ``repgan.cli``."""
    return logging.getLogger(f"{PACKAGE_LOGGER}.{name}")
