"""Centralized logging configuration with multi-level verbosity support.

This module provides setup_logging() for configuring logging based on
verbosity count from CLI arguments (-v, -vv, -vvv).
"""

import logging
import sys

TRACE_LOGGER = "edge_offload_tool.trace"


def setup_logging(verbose_count: int = 0) -> None:
    """Configure logging based on verbosity level.

    Maps CLI verbosity count to Python logging levels. Per-slot trace output
    is emitted on a dedicated logger that stays quiet below -vvv, because a
    3000-slot run would otherwise flood the terminal.

    Args:
        verbose_count: Number of -v flags (-1 for quiet, 0-3+)
            -1: ERROR level (quiet mode)
            0: WARNING level
            1: INFO level (run start/finish and aggregates)
            2: DEBUG level (training steps, refits, K updates)
            3+: DEBUG + per-slot trace

    Example:
        >>> setup_logging(0)  # No -v flag: WARNING only
        >>> setup_logging(1)  # -v: INFO level
        >>> setup_logging(3)  # -vvv: DEBUG + per-slot trace
    """
    if verbose_count < 0:
        level = logging.ERROR
    elif verbose_count == 0:
        level = logging.WARNING
    elif verbose_count == 1:
        level = logging.INFO
    else:
        level = logging.DEBUG

    # Detailed format for DEBUG includes line numbers
    if verbose_count >= 2:
        fmt = "[%(levelname)s] %(name)s:%(lineno)d - %(message)s"
    else:
        fmt = "[%(levelname)s] %(name)s - %(message)s"

    logging.basicConfig(
        level=level,
        format=fmt,
        stream=sys.stderr,
        force=True,  # Override any existing configuration
    )

    if verbose_count >= 3:
        logging.getLogger(TRACE_LOGGER).setLevel(logging.DEBUG)
    else:
        logging.getLogger(TRACE_LOGGER).setLevel(logging.WARNING)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for a module.

    Args:
        name: Module name (typically __name__)

    Returns:
        Logger instance
    """
    return logging.getLogger(name)


def get_trace_logger() -> logging.Logger:
    """Get the per-slot trace logger (enabled with -vvv)."""
    return logging.getLogger(TRACE_LOGGER)
