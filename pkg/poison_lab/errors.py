"""Exception hierarchy shared by the lab's modules."""

from typing import Optional


class PoisonLabError(Exception):
    """Base class for every error raised by the lab."""


class ShapeError(PoisonLabError, ValueError):
    """Tensor shapes or dimensions do not agree."""


class InvalidArgumentError(PoisonLabError, ValueError):
    """A scalar argument is outside its allowed range."""


class ConfigError(PoisonLabError, ValueError):
    """Experiment or training configuration is invalid."""


class MissingCheckpointError(ConfigError):
    """A warm-start run was requested without a checkpoint on disk."""

    def __init__(self, path: str):
        super().__init__(
            f"Warm-start checkpoint not found at '{path}'. "
            f"Create it first with: python main.py pretrain --out <dir>"
        )
        self.path = path


class CheckpointError(PoisonLabError):
    """Base class for checkpoint decoding failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic number or unsupported format version."""


class TruncatedStreamError(CheckpointError):
    """A byte stream ended before a complete record was read."""


class CorruptRecordError(PoisonLabError):
    """A dataset record holds an impossible value."""

    def __init__(self, message: str, record_index: int):
        super().__init__(f"{message} (record {record_index})")
        self.record_index = record_index


class PoisonCraftingError(PoisonLabError):
    """Poison optimisation produced a non-finite loss or gradient."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class DegenerateBasisError(PoisonLabError):
    """A 2-D projection basis cannot be formed from the given vectors."""


class SerializationError(PoisonLabError, ValueError):
    """A report field cannot be serialised losslessly."""

    def __init__(self, field: str, value: Optional[float] = None):
        super().__init__(f"Field '{field}' holds a non-finite value ({value})")
        self.field = field


class TrainingDivergedError(PoisonLabError):
    """A training epoch produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became {loss} in epoch {epoch}")
        self.epoch = epoch
