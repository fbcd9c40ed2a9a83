"""Dataset I/O, prompt templating, the synthetic task and experiment runs."""
from .experiment import (
    COMBINED,
    MODES,
    NO_STEERING,
    Experiment,
    ExperimentConfig,
    SweepResult,
    SweepRow,
    build_experiment,
    label_distribution_report,
    layer_sweep,
    run_experiment,
    write_outputs,
)
from .prompts import PromptTemplate, render_prompt, sample_few_shot
from .records import DatasetRecord, Feedback, load_dataset, save_dataset
from .synthetic import SyntheticTask, generate_synthetic_task, write_task

__all__ = [
    "COMBINED",
    "MODES",
    "NO_STEERING",
    "DatasetRecord",
    "Experiment",
    "ExperimentConfig",
    "Feedback",
    "PromptTemplate",
    "SweepResult",
    "SweepRow",
    "SyntheticTask",
    "build_experiment",
    "generate_synthetic_task",
    "label_distribution_report",
    "layer_sweep",
    "load_dataset",
    "render_prompt",
    "run_experiment",
    "sample_few_shot",
    "save_dataset",
    "write_outputs",
    "write_task",
]
