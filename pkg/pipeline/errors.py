"""
Exception hierarchy shared by the workbench modules
"""

from typing import Optional


class WorkbenchError(Exception):
    """Base class for every error raised by the pipeline"""


class InvalidInputError(WorkbenchError, ValueError):
    """An argument violates an operation's precondition"""


class DataError(WorkbenchError):
    """Input data (manifests, frames, scenarios, model files) is unusable"""


class ManifestError(DataError):
    """A manifest row could not be parsed or violates a sample invariant"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(f"{prefix}{message}")


class FrameLoadError(DataError):
    """A camera frame referenced by a sample could not be read"""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        suffix = f" (sample {sample_id})" if sample_id else ""
        super().__init__(f"{message}{suffix}")


class ScenarioError(DataError):
    """A scenario file is malformed or describes an invalid track"""


class ModelFormatError(DataError):
    """A model file has the wrong magic, version or checksum"""


class IncompatibleModelError(DataError):
    """A model cannot consume the frames a scenario renders"""


class NumericError(WorkbenchError, ArithmeticError):
    """Training produced a non-finite value"""

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        self.epoch = epoch
        self.step = step
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        suffix = f" at {', '.join(where)}" if where else ""
        super().__init__(f"{message}{suffix}")
