from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .runs import dump_embeddings, random_baseline, report_group_assignments, run_eval, run_train, sweep_groups

__all__ = [
    "ExperimentConfig",
    "apply_overrides",
    "dump_embeddings",
    "load_config",
    "random_baseline",
    "report_group_assignments",
    "run_eval",
    "run_train",
    "save_config",
    "sweep_groups",
]
