from .detector import (
    Detector,
    EncoderOutput,
    ModelOutput,
    PatternBank,
    QuerySet,
    Routing,
    TopKSelection,
    compose_queries,
    decode,
    encode,
    gather_selection,
    generate_weights,
    grid_anchors,
    patchify,
    select_topk,
)
from .parameters import init_parameters, parameter_shapes

__all__ = [
    "Detector",
    "EncoderOutput",
    "ModelOutput",
    "PatternBank",
    "QuerySet",
    "Routing",
    "TopKSelection",
    "compose_queries",
    "decode",
    "encode",
    "gather_selection",
    "generate_weights",
    "grid_anchors",
    "init_parameters",
    "parameter_shapes",
    "patchify",
    "select_topk",
]
