"""Adversarially robust image classifiers and the tools to inspect them.

A small numpy autodiff engine drives residual networks, PGD attacks and
adversarial training; attribution, feature visualisation and Frechet
distance modules measure how interpretable the resulting models are.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, pgd_attack
from .data import Dataset, generate_synthetic, load_cifar10, read_ppm, write_ppm
from .estimators import (ClassConditionalMVN, ExpectedGradientsExplainer, IntegratedGradientsExplainer,
                         ResNetClassifier)
from .exceptions import ConfigError, DimensionError, DivergenceError, FormatError, TapeError
from .models import NetworkSpec, ParameterStore, build, micro_resnet
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, train

__all__ = [
    "AttackConfig", "ClassConditionalMVN", "ConfigError", "Dataset", "DimensionError", "DivergenceError",
    "ExpectedGradientsExplainer", "FormatError", "IntegratedGradientsExplainer", "NetworkSpec",
    "ParameterStore", "ResNetClassifier", "TapeError", "Tensor", "TrainConfig", "build", "evaluate",
    "generate_synthetic", "load_cifar10", "micro_resnet", "no_grad", "pgd_attack", "read_ppm", "train",
    "write_ppm",
]
