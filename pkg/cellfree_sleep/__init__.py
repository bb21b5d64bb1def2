"""cellfree-sleep - energy management of cell-free massive MIMO with advanced sleep modes."""

__version__ = "0.1.0"

from .config import ScenarioConfig, load_scenario
from .env import CellFreeEnv, JointAction
from .metrics import run_episodes

__all__ = ["CellFreeEnv", "JointAction", "ScenarioConfig", "load_scenario", "run_episodes"]
