from .models import (
    AnalysisConfig,
    DatasetConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    parse_assignment,
)

__all__ = [
    "AnalysisConfig",
    "DatasetConfig",
    "EvalConfig",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "parse_assignment",
]
