"""Dataset I/O, experiment orchestration, diagnostics and the CLI."""

from .diagnostics import cross_covariance_norm, independence_score, proxy_divergence
from .experiment import (Ablation, ExperimentConfig, InputKind, MetricsReport, PreprocConfig, Scenario,
                         SweepKind, last5_metric, run_experiment, run_sweep)
from .io import export_features, load_dataset, save_dataset

__all__ = ["Ablation", "ExperimentConfig", "InputKind", "MetricsReport", "PreprocConfig", "Scenario",
           "SweepKind", "cross_covariance_norm", "export_features", "independence_score", "last5_metric",
           "load_dataset", "proxy_divergence", "run_experiment", "run_sweep", "save_dataset"]
