"""Diverse knowledge distillation for end-to-end person search, at desk scale.

Modules: ``types`` (shared values, RNG), ``autograd`` (numpy reverse mode),
``losses`` (task and distillation losses), ``augment`` (ISA/FSA, RoIAlign),
``data`` (synthetic scenes), ``models`` (student/teacher, SGD, checkpoints),
``metrics`` (detection AP, mAP, CMC) and ``train`` (experiments, ablations).
"""

from .types import AugConfig, BoundingBox, LossConfig, Rng
from .data import SplitSpec, generate, load_dataset, save_dataset
from .train import ExperimentConfig, preset, run_ablation, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "BoundingBox", "LossConfig", "Rng", "SplitSpec", "generate", "load_dataset",
    "save_dataset", "ExperimentConfig", "preset", "run_ablation", "train_student", "train_teacher",
]
