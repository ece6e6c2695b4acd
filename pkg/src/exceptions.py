"""Exception hierarchy for the workbench.

Each class carries the process exit code the CLI reports for it.
"""
from typing import Optional


class WorkbenchError(Exception):
    """Base class for every error raised by the workbench"""

    exit_code: int = 3


class ConfigError(WorkbenchError):
    """Invalid or unreadable experiment configuration"""

    exit_code = 2


class StageError(WorkbenchError):
    """A pipeline stage failed; the stage name is kept for the diagnostic"""

    exit_code = 3

    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage '{stage}' failed: {detail}")
        self.stage = stage
        self.detail = detail


class ContainerError(WorkbenchError):
    """Model container I/O or format fault"""

    exit_code = 4


class ShapeError(WorkbenchError, ValueError):
    """Tensor or feature widths do not line up"""


class DynamicsError(WorkbenchError, ValueError):
    """Ego dynamics misuse: kind mismatch, non-finite state, bad transitions"""


class SimulationError(WorkbenchError):
    """World simulation could not proceed"""


class OverDensityError(SimulationError):
    """Spawn placement exhausted its rejection-sampling budget"""

    def __init__(self, requested: int, placed: int, budget: int):
        super().__init__(
            f"could not place {requested} obstacles with the required clearance "
            f"(placed {placed} within a budget of {budget} draws); lower the density"
        )
        self.requested = requested
        self.placed = placed


class DatasetError(WorkbenchError, ValueError):
    """Labeled dataset is empty or missing a required subset"""


class TrainingDivergedError(WorkbenchError):
    """Loss went non-finite during optimization"""

    def __init__(self, phase: str, iteration: int, value: Optional[float] = None):
        super().__init__(f"{phase} diverged at iteration {iteration} (loss={value})")
        self.phase = phase
        self.iteration = iteration
