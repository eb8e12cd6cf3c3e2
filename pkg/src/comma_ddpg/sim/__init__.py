from .config import CorridorConfig, load_corridor_config
from .simulator import (
    CorridorState,
    CumulativeMetrics,
    GreenEnd,
    SignalState,
    Simulator,
    StepMetrics,
    new_corridor,
)

__all__ = [
    "CorridorConfig", "CorridorState", "CumulativeMetrics", "GreenEnd", "SignalState",
    "Simulator", "StepMetrics", "load_corridor_config", "new_corridor",
]
