"""Pole-free rational units in sparse additive topologies.

Library layout:

- units: the 1D/2D rational units and their exact derivatives
- model: shallow additive models, deep residual stacks, budget accounting
- training: losses, grouped Adam, group lasso, the train loop
- stability: certified Lipschitz bounds and depth-scaling probes
- dynamics: empirical tangent kernels and first-order influence
- discovery: pruning, rational snapping, symbolic extraction
- benchmarks: synthetic target registry, dataset builders, runners
- cli: the `ran` command-line entry point
"""

__version__ = "0.1.0"

from .model import (
    AnovaModel,
    DeepRanStack,
    InteractionSet,
    build_anova_model,
    build_deep_stack,
    build_random_topology,
    estimate_params_kanbefair,
    param_count,
    param_count_formula,
)
from .training import Dataset, TrainConfig, TrainReport, train
from .units import RationalUnit1D, RationalUnit2D, softplus_stable

__all__ = [
    "AnovaModel",
    "DeepRanStack",
    "Dataset",
    "InteractionSet",
    "RationalUnit1D",
    "RationalUnit2D",
    "TrainConfig",
    "TrainReport",
    "__version__",
    "build_anova_model",
    "build_deep_stack",
    "build_random_topology",
    "estimate_params_kanbefair",
    "param_count",
    "param_count_formula",
    "softplus_stable",
    "train",
]
