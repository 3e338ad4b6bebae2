"""
Logging setup.

Every module logs through `get_logger(__name__)`; lines carry a wall-clock
timestamp in the same `[YYYY-mm-dd HH:MM:SS] message` shape used across the
project's command-line tools.
"""

import logging
import sys
from typing import Optional

LOG_FORMAT = "[%(asctime)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
ROOT_NAME = "gridreg"

_configured = False


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def configure_logging(level: int = logging.INFO, stream=None) -> logging.Logger:
    """
    Attach a single timestamped stream handler to the package root logger.

    Args:
        level: Logging level for the package root
        stream: Optional stream (defaults to stderr)

    Returns:
        The package root logger
    """
    global _configured
    root = logging.getLogger(ROOT_NAME)
    if not _configured:
        handler = logging.StreamHandler(stream) if stream is not None else _StderrHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    root.setLevel(level)
    return root


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return a child of the package logger, configuring it on first use."""
    if not _configured:
        configure_logging()
    if not name:
        return logging.getLogger(ROOT_NAME)
    return logging.getLogger(f"{ROOT_NAME}.{name}")
