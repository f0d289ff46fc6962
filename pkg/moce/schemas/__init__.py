from .instruction import InstructionRecord
from .config import ModelConfig, RunConfig
from .metrics import StepMetrics, MetricsReport, RouteStatsReport, AblationRow

__all__ = [
    "InstructionRecord",
    "ModelConfig",
    "RunConfig",
    "StepMetrics",
    "MetricsReport",
    "RouteStatsReport",
    "AblationRow",
]
