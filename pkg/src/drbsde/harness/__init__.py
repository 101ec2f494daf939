from .config import ConfigError, ExperimentConfig, load_config, parse_config_text, preset
from .scenarios import convergence_study, emit_report, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config_text", "preset",
           "convergence_study", "emit_report", "run_experiment"]
