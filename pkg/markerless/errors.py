"""
errors.py - Exception hierarchy for the markerless pipeline.

Data/input problems subclass ValueError, environment and numerical failures
subclass RuntimeError, so callers can catch either the specific class or the builtin.
"""


class MarkerlessError(Exception):
    """Root of every error raised by this package."""


# ======================
# INPUT / FORMAT
# ======================
class PoseParseError(MarkerlessError, ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class PoseSchemaError(MarkerlessError, ValueError):
    pass


class RasterFormatError(MarkerlessError, ValueError):
    pass


class ClockParseError(MarkerlessError, ValueError):
    pass


class ConfigError(MarkerlessError, ValueError):
    pass


class SyncInputError(MarkerlessError, ValueError):
    pass


class InvalidRigError(MarkerlessError, ValueError):
    pass


# ======================
# AGENT
# ======================
class AgentTransportError(MarkerlessError, RuntimeError):
    """Network-level failure; safe to retry later."""

    retriable = True


class AgentProtocolError(MarkerlessError, RuntimeError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class AgentPrivacyError(MarkerlessError, RuntimeError):
    pass


# ======================
# NOT ENOUGH DATA
# ======================
class InsufficientDataError(MarkerlessError, ValueError):
    pass


class UndefinedCenterError(MarkerlessError, ValueError):
    pass


class AnchorRequiredError(MarkerlessError, ValueError):
    pass


class InsufficientCorrespondenceError(MarkerlessError, ValueError):
    pass


class NoOverlapError(MarkerlessError, ValueError):
    pass


class UndefinedCorrelationError(MarkerlessError, ValueError):
    pass


class NoDataError(MarkerlessError, ValueError):
    pass


# ======================
# GEOMETRY / OPTIMIZATION
# ======================
class DegenerateGeometryError(MarkerlessError, RuntimeError):
    pass


class CheiralityError(MarkerlessError, RuntimeError):
    pass


class DivergenceError(MarkerlessError, RuntimeError):
    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


# ======================
# PIPELINE
# ======================
class StageError(MarkerlessError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
