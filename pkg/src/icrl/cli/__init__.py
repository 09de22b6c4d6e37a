from .config import EnvConfig, EvalConfig, ExperimentConfig, dump_config, parse_config
from .main import main, run_eval, run_fewshot, run_plot, run_probe, run_train

__all__ = [
    "EnvConfig",
    "EvalConfig",
    "ExperimentConfig",
    "dump_config",
    "main",
    "parse_config",
    "run_eval",
    "run_fewshot",
    "run_plot",
    "run_probe",
    "run_train",
]
