"""Adversarial robustness evaluation toolkit for image-patch classifiers."""

__version__ = "0.1.0"

from .attack import (  # noqa: E402
    AttackConfig,
    AttackResult,
    ConstraintSpec,
    Perturbation,
    apply,
    energies,
    single_instance_attack,
    universal_attack,
)
from .data import Dataset, LabeledPatch, SynthConfig, generate, load_dir, save_dir, split  # noqa: E402
from .estimators import PatchClassifier, PGDAttack, UniversalPerturbation  # noqa: E402
from .model import Model, ModelSpec, TrainConfig, build_model, predict, train  # noqa: E402

__all__ = [
    "AttackConfig",
    "AttackResult",
    "ConstraintSpec",
    "Dataset",
    "LabeledPatch",
    "Model",
    "ModelSpec",
    "PGDAttack",
    "PatchClassifier",
    "Perturbation",
    "SynthConfig",
    "TrainConfig",
    "UniversalPerturbation",
    "apply",
    "build_model",
    "energies",
    "generate",
    "load_dir",
    "predict",
    "save_dir",
    "single_instance_attack",
    "split",
    "train",
    "universal_attack",
]
