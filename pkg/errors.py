from __future__ import annotations

from pathlib import Path
import typing

if typing.TYPE_CHECKING:
    from typing import *


class SplatError(Exception):
    """Base class for every error raised by the trainer."""


class NonFiniteParameterError(SplatError):
    def __init__(self, name: str, index: int):
        self.name = name
        self.index = int(index)
        super().__init__(f"non-finite value in '{name}' at primitive {self.index}")


class ShapeMismatchError(SplatError):
    pass


class ConfigError(SplatError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class OracleDomainError(SplatError, ValueError):
    pass


class TrainingDivergedError(SplatError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = int(iteration)
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at iteration {self.iteration}")


class ModelIOError(SplatError):
    def __init__(self, path: Union[str, Path], message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")
