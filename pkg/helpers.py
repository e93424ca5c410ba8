import os
import sys
import logging
from typing import Optional, Tuple

# Get environment variables
LOG_LEVEL = os.getenv('SLOWPOOL_LOG_LEVEL', 'INFO').upper()  # Default to INFO if not set
LOG_FILE = os.getenv('SLOWPOOL_LOG_FILE', '')  # No log file unless asked for
WORKERS = int(os.getenv('SLOWPOOL_WORKERS', '1'))  # Threads for minibatch/eval loops

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
APP_LOGGER = 'SlowPool'


class SlowPoolError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(SlowPoolError, ValueError):
    """Raised when array dimensions do not conform"""

    def __init__(self, message: str, expected: Tuple = None, found: Tuple = None):
        if expected is not None or found is not None:
            message = f"{message} (expected {expected}, found {found})"
        super().__init__(message)
        self.expected = expected
        self.found = found


class ConfigError(SlowPoolError, ValueError):
    """Raised for invalid sizes, hyperparameters or generator specs"""


class FormatError(SlowPoolError):
    """Raised when a binary file cannot be decoded"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class NumericError(SlowPoolError):
    """Raised on non-finite gradients or a diverging loss"""

    def __init__(self, message: str, coordinate: Optional[Tuple] = None):
        if coordinate is not None:
            message = f"{message} at coordinate {coordinate}"
        super().__init__(message)
        self.coordinate = coordinate


class UnsupportedError(SlowPoolError):
    """Raised when an operation is asked for a variant it does not implement"""


def set_workers(count: int) -> None:
    """Set the number of threads used for minibatch and evaluation loops"""
    global WORKERS
    if count < 1:
        raise ConfigError(f"Worker count must be at least 1, got {count}")
    WORKERS = count


def set_log_level(level: str) -> None:
    """Set the level applied by configure_logging"""
    global LOG_LEVEL
    LOG_LEVEL = level.upper()


def set_log_file(path: str) -> None:
    """Set the optional log file used by configure_logging"""
    global LOG_FILE
    LOG_FILE = path


def configure_logging(stream=None) -> logging.Logger:
    """
    Configure the application logger

    Progress goes to the error stream so that standard output stays
    machine-readable. A file handler is added when LOG_FILE is set.

    Args:
        stream: stream for the console handler (defaults to sys.stderr)

    Returns:
        The application logger
    """
    app_logger = logging.getLogger(APP_LOGGER)
    app_logger.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))

    # Drop handlers from a previous call so repeated runs don't duplicate lines
    for handler in list(app_logger.handlers):
        app_logger.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler(stream or sys.stderr)
    console.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
    app_logger.addHandler(console)

    if LOG_FILE:
        file_handler = logging.FileHandler(LOG_FILE)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        app_logger.addHandler(file_handler)

    return app_logger
