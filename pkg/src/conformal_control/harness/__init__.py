"""Experiment orchestration: presets, pipeline stages and file export."""
from .config import PRESETS, ExperimentConfig, preset
from .experiment import (
    CoverageReport,
    Pipeline,
    RunSummary,
    StageError,
    calibrate,
    calibrate_violations,
    coverage_experiment,
    fit_model,
    gen_data,
    prepare,
    run_experiment,
)
from .export import export, paired_report

__all__ = [
    "PRESETS",
    "CoverageReport",
    "ExperimentConfig",
    "Pipeline",
    "RunSummary",
    "StageError",
    "calibrate",
    "calibrate_violations",
    "coverage_experiment",
    "export",
    "fit_model",
    "gen_data",
    "paired_report",
    "prepare",
    "preset",
    "run_experiment",
]
