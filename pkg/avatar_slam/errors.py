"""Exception types shared across the pipeline."""
from __future__ import annotations

from typing import Optional


class ContractViolation(ValueError):
    """A precondition on shapes, ranges or normalization was broken."""


class DegenerateInputError(ValueError):
    """Metric input that admits no well-defined alignment or value."""


class DatasetError(ValueError):
    """A dataset or checkpoint container could not be read."""


class VersionMismatch(DatasetError):
    def __init__(self, kind: str, found: int, expected: int):
        super().__init__(f"{kind} container version {found} is not supported (expected {expected})")
        self.kind = kind
        self.found = found
        self.expected = expected


class TruncatedFile(DatasetError):
    pass


class InitializationError(RuntimeError):
    def __init__(self, message: str, frame_id: Optional[int] = 0):
        super().__init__(f"frame {frame_id}: {message}")
        self.frame_id = frame_id


class TrackingError(RuntimeError):
    def __init__(self, message: str, frame_id: Optional[int] = None):
        super().__init__(f"frame {frame_id}: {message}")
        self.frame_id = frame_id


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss and cannot continue."""
