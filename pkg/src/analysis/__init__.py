from .activation import ActivationStats, ActivationTracker, gini, record_activation
from .cost import CostReport, cost_report, count_flops, count_params, paq_param_formula
from .gradcheck import GradcheckReport, run_gradcheck, tiny_model_config
from .report import (
    CURVE_COLUMNS,
    ABReport,
    ABRow,
    RunSummary,
    ab_report,
    load_run,
    read_metrics,
    write_curves,
)

__all__ = [
    "CURVE_COLUMNS",
    "ABReport",
    "ABRow",
    "ActivationStats",
    "ActivationTracker",
    "CostReport",
    "GradcheckReport",
    "RunSummary",
    "ab_report",
    "cost_report",
    "count_flops",
    "count_params",
    "gini",
    "load_run",
    "paq_param_formula",
    "read_metrics",
    "record_activation",
    "run_gradcheck",
    "tiny_model_config",
    "write_curves",
]
