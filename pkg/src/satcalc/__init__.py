"""Multi-task forest-structure inversion from 4-band reflectance at desk scale."""

from ._accel import backend
from .dataset import ALL_TASKS, TaskId
from .grid import BandStack, Grid2D, GridError

__version__ = "0.1.0"

__all__ = ["ALL_TASKS", "BandStack", "Grid2D", "GridError", "TaskId", "backend", "__version__"]
