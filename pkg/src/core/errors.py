"""Exception hierarchy shared by every blink-segmentation module."""

from typing import Optional


class BlinkSegmentationError(Exception):
    """Base class for all domain errors raised by this package."""


class DimensionError(BlinkSegmentationError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(BlinkSegmentationError):
    """A caller broke an operation precondition."""


class NumericalError(BlinkSegmentationError, ArithmeticError):
    """A NaN or infinite value was produced."""


class ConfigError(BlinkSegmentationError, ValueError):
    """Invalid configuration or hyperparameters."""


class IngestionError(BlinkSegmentationError):
    """A recording or manifest file cannot be ingested."""


class ParseError(IngestionError):
    """A cell of a recording file cannot be parsed."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)


class SelectionError(BlinkSegmentationError):
    """A requested electrode is absent from the recording."""

    def __init__(self, electrode: str, subject_id: str = ""):
        self.electrode = electrode
        where = f" in recording {subject_id}" if subject_id else ""
        super().__init__(f"Electrode {electrode} not present{where}")


class InputTooShortError(BlinkSegmentationError):
    """The recording is shorter than one window."""


class DivergenceError(BlinkSegmentationError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"Loss diverged (NaN/Inf) at epoch {epoch}")


class CheckpointError(BlinkSegmentationError):
    """A checkpoint file cannot be loaded."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field is not None:
            message = f"{message} [field: {field}]"
        super().__init__(message)
