"""Spyglass logging and metrics for fsa-yolo."""

import logging
import os
import platform

import numpy as np
from spyglass import initialize

from src.config import DTYPE
from src.config import SPYGLASS_HOST
from src.config import SPYGLASS_PROJECT

logger, metrics = initialize(
    host=os.environ.get("SPYGLASS_HOST", SPYGLASS_HOST),
    project=SPYGLASS_PROJECT,
)


def get_logger(name: str) -> logging.Logger:
    """Return a module logger after Spyglass logging is configured."""
    return logging.getLogger(name)


def log_runtime(command: str, workers: int) -> None:
    """One line per CLI invocation with what the numbers depend on."""
    logger.info(
        f"[{command}] python {platform.python_version()}, numpy {np.__version__}, "
        f"dtype {DTYPE}, {workers} worker threads"
    )
    metrics.increment(f"cli.{command}")
