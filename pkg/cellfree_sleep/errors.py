"""Exception hierarchy shared by the simulator, the trainers and the CLI."""

from pathlib import Path
from typing import Optional


class CellFreeError(Exception):
    """Base class for every error raised by cellfree_sleep."""


class ScenarioParseError(CellFreeError):
    """Scenario file is not well-formed YAML."""

    def __init__(self, path: Path, message: str, line: Optional[int] = None,
                 column: Optional[int] = None):
        self.path = path
        self.line = line
        self.column = column
        locus = f"{path}:{line}:{column}" if line is not None else str(path)
        super().__init__(f"Invalid YAML in {locus}: {message}")


class ScenarioValidationError(CellFreeError):
    """Scenario parsed but violates an invariant; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class InternalConsistencyError(CellFreeError):
    """A physics precondition was violated inside the simulator."""


class CheckpointError(CellFreeError):
    """Checkpoint missing, unreadable or shape-incompatible."""


class TrainingDivergedError(CellFreeError):
    """A loss became non-finite; ``dump_path`` points at the diagnostic dump."""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        self.dump_path = dump_path
        suffix = f" (diagnostics: {dump_path})" if dump_path else ""
        super().__init__(f"{message}{suffix}")
