from .config import ExperimentPlan, load_config
from .runner import RunRecord, run_experiment
from .report import build_report, write_report

__all__ = [
    "ExperimentPlan",
    "RunRecord",
    "build_report",
    "load_config",
    "run_experiment",
    "write_report",
]
