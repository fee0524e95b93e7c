from .metrics import (
    APResult,
    Detection,
    compute_ap,
    compute_map,
    evaluate_split,
    extract_detections,
    interpolated_ap,
    load_detections,
    match_detections,
    predict_split,
    save_detections,
)

__all__ = [
    "APResult",
    "Detection",
    "compute_ap",
    "compute_map",
    "evaluate_split",
    "extract_detections",
    "interpolated_ap",
    "load_detections",
    "match_detections",
    "predict_split",
    "save_detections",
]
