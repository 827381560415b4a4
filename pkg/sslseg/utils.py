"""
Shared helpers: the exception tree used by the command line, tqdm-to-logging
redirection and seeded random streams.
"""
import io
import logging

import numpy as np


class SSLSegError(Exception):
    """Base class for errors that map onto a process exit code."""
    exit_code = 1


class ConfigError(SSLSegError, ValueError):
    """Invalid or inconsistent experiment configuration."""
    exit_code = 2


class DataError(SSLSegError):
    """Missing, malformed or inconsistent data on disk."""
    exit_code = 3


class NumericalError(SSLSegError, FloatingPointError):
    """A training loss became NaN or Inf."""
    exit_code = 4


class TqdmToLogger(io.StringIO):
    """
        Output stream for TQDM which will output to logger module instead of
        the StdOut.
    """
    logger = None
    level = None
    buf = ""

    def __init__(self, logger, level=None):
        super(TqdmToLogger, self).__init__()
        self.logger = logger
        self.level = level or logging.INFO

    def write(self, buf):
        self.buf = buf.strip("\r\n\t ")

    def flush(self):
        self.logger.log(self.level, self.buf)


def rng_stream(*keys):
    """Return a numpy Generator seeded from a tuple of non-negative integers.

    Streams derived from distinct key tuples are statistically independent, so
    per-image / per-epoch streams can be consumed in any order or in parallel.
    The key count is part of the entropy, as numpy zero-pads short seeds and
    (seed, 7) would otherwise match (seed, 7, 0).

    Args:
        *keys (int): seed components, e.g. (seed, image_id, epoch).

    Returns:
        numpy.random.Generator
    """
    return np.random.default_rng([len(keys)] + [int(k) for k in keys])


def check_finite_loss(loss, logger, where=""):
    """Raise NumericalError if a scalar loss tensor is NaN or Inf."""
    value = float(loss.detach())
    if not np.isfinite(value):
        error_message = f"non-finite loss {value} {where}".strip()
        logger.critical(error_message)
        raise NumericalError(error_message)
    return value
