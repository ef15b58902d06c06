"""
log_setup.py - Colored stderr logging for command-line runs.
"""

import logging
import sys

import colorlog

LOG_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(cyan)s%(name)s%(reset)s %(message)s"
LOG_COLORS = {
    "DEBUG": "white",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "bold_red",
}


def configure_logging(verbose: bool = False) -> logging.Logger:
    """Install one colored handler on the package logger; safe to call repeatedly."""
    logger = logging.getLogger("markerless")
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(logger.handlers):
        if getattr(handler, "_markerless", False):
            logger.removeHandler(handler)

    handler = colorlog.StreamHandler(sys.stderr)
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT, log_colors=LOG_COLORS))
    handler._markerless = True
    logger.addHandler(handler)
    logger.propagate = False
    return logger
