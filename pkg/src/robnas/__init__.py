"""Differentiable search, adversarial training, and attack evaluation for
accurate-and-robust convolutional architectures, on a pure numpy substrate."""

__version__ = "0.1.0"

from .attacks import AttackConfig, fgsm, pgd, transfer_attack
from .autodiff import (
    GradientMap,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    forward_primitive,
)
from .genotypes import CellKind, Genotype, SupernetConfig, discretize
from .mgda import CombineResult, GradientPair, combine, compute_gamma, mgda_step
from .search import SearchSchedule, run_search
from .supernet import ArchParams, Supernet, build_supernet, instantiate
from .train import TrainConfig, adversarial_train, evaluate

__all__ = [
    "AttackConfig", "fgsm", "pgd", "transfer_attack",
    "GradientMap", "Tape", "Tensor", "backward", "finite_difference_check",
    "forward_primitive",
    "CellKind", "Genotype", "SupernetConfig", "discretize",
    "CombineResult", "GradientPair", "combine", "compute_gamma", "mgda_step",
    "SearchSchedule", "run_search",
    "ArchParams", "Supernet", "build_supernet", "instantiate",
    "TrainConfig", "adversarial_train", "evaluate",
]
