"""Exception hierarchy for candistill"""


class CanDistillError(Exception):
    """Base class for every error raised by the package"""


class FrameError(CanDistillError, ValueError):
    """A CAN frame violates the classic 11-bit frame invariants"""


class ParseError(CanDistillError):
    """A log record could not be decoded"""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
        self.reason = message


class ShapeError(CanDistillError, ValueError):
    """Tensor shapes are incompatible for the requested operation"""


class ConfigError(CanDistillError):
    """A configuration value is missing or out of range"""


class AttackSpecError(CanDistillError, ValueError):
    """An attack specification cannot be applied to the given log"""


class CheckpointError(CanDistillError):
    """A parameter store file is missing, truncated or malformed"""


class DatasetError(CanDistillError):
    """A dataset is empty, single-class, misaligned or mismatched"""


class TrainingError(CanDistillError):
    """Training cannot start or continue with the given inputs"""
