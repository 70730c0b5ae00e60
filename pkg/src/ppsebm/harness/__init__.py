"""Continual-learning experiment driver, baselines, batteries and the CLI."""

from .config import DEFAULT_ORDER, GRID, METHODS, ConfigError, ExperimentConfig, load_config
from .metrics import (MetricsReport, evaluate, exact_match, forgetting_curve, mean_forgetting,
                      token_f1)
from .runner import (ExperimentDivergence, Lab, learner_gradients, run_continual, run_multitask,
                     train_stage)

__all__ = [
    "DEFAULT_ORDER", "GRID", "METHODS", "ConfigError", "ExperimentConfig", "ExperimentDivergence",
    "Lab", "MetricsReport", "evaluate", "learner_gradients", "exact_match", "forgetting_curve", "load_config",
    "mean_forgetting", "run_continual", "run_multitask", "token_f1", "train_stage",
]
