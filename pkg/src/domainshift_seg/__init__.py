"""Domain-generalization training harness for binary tumour segmentation.

Three strategies (standard, cross-task pretraining, dataset union) are run
as k-fold ensembles on two tasks and scored with per-image Dice on seen and
unseen domains.
"""

from .core import (BinaryMask, DomainLabel, ExperimentConfig, ImagePatch, Sample, SplitPlan, Strategy, Task,
                   TaskDataset, load_manifest, save_manifest, validate_sample)
from .evaluation import MetricsReport, aggregate, dice, ensemble, evaluate, predict, sigmoid_map, threshold
from .model import (Checkpoint, ModelConfig, build_model, fingerprint, load_checkpoint, load_parameters,
                    parameter_count, save_checkpoint)
from .strategies import make_folds, run_cross_task, run_matrix, run_standard, run_union
from .synthetic import GeneratorConfig, generate_sample, generate_task, make_styles
from .training import AdamState, ScheduleConfig, adam_step, bce_loss, cosine_lr, resize_for_training, train

__version__ = "0.1.0"

__all__ = [
    "adam_step", "AdamState", "aggregate", "bce_loss", "BinaryMask", "build_model", "Checkpoint", "cosine_lr",
    "dice", "DomainLabel", "ensemble", "evaluate", "ExperimentConfig", "fingerprint", "generate_sample",
    "generate_task", "GeneratorConfig", "ImagePatch", "load_checkpoint", "load_manifest", "load_parameters",
    "make_folds", "make_styles", "MetricsReport", "ModelConfig", "parameter_count", "predict",
    "resize_for_training", "run_cross_task", "run_matrix", "run_standard", "run_union", "Sample", "save_checkpoint",
    "save_manifest", "ScheduleConfig", "sigmoid_map", "SplitPlan", "Strategy", "Task", "TaskDataset", "threshold",
    "train", "validate_sample",
]

