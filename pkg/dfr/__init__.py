# See the accompanying LICENSE file.
"""Feature-guided non-rigid registration of a template mesh onto point clouds.

The package deforms a source triangle mesh onto a target point cloud using an
embedded deformation graph, with correspondences refreshed during the
optimization and filtered by a bijectivity test.  A functional map
diagnostics layer and an evaluation harness for dense correspondences are
included.
"""

from __future__ import annotations

import logging

__version__ = "1.0.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())


class Error(Exception):
    "Base class for all exceptions raised by this package"


class InputError(Error):
    """Something supplied by the caller is unusable.  The shell exits with
    code 2 for these."""


class ParseError(InputError):
    """A shape, map, feature or cache file could not be parsed

    :param message: What was wrong
    :param path: File being read
    :param line: 1-based line number for text formats
    :param offset: Byte offset for binary formats
    """

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None, offset: int | None = None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line { line }")
        if offset is not None:
            where.append(f"byte offset { offset }")
        if where:
            message = ", ".join(where) + ": " + message
        super().__init__(message)


class ArgumentError(InputError):
    "An argument is out of its permitted range"


class DimensionError(InputError):
    "Array shapes are inconsistent with each other"


class UnsupportedModeError(InputError):
    "The requested mode does not apply to this kind of shape"


class ConfigError(InputError):
    "Unknown key, section or unparsable value in a configuration or manifest"


class NumericalError(Error):
    """A computation failed numerically.  The shell exits with code 3 for
    these."""


class SingularityError(NumericalError):
    "A linear system has no unique solution"


class ConvergenceError(NumericalError):
    """An iterative solver did not reach the requested accuracy

    :param residuals: Residual norm for each returned pair
    """

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class NonFiniteEnergyError(NumericalError):
    """The registration energy became NaN or infinite

    The deformation state at the failing iteration and the trace up to it
    are attached for diagnosis.
    """

    def __init__(self, message: str, *, state=None, trace=None, iteration: int | None = None):
        super().__init__(message)
        self.state = state
        self.trace = trace
        self.iteration = iteration
