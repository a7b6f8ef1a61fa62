"""Physics-guided neural network training and compression for ground
magnetic perturbation forecasting.

Subpackages:

    physics     coupling function, clock angle, physics residuals,
                composite loss and its analytic gradients
    nn_core     dense MLP, backprop, SGD/Adam, training loop
    dataset     CSV ingestion, gap repair, target derivation, splitting,
                min-max scaling
    synth       seeded synthetic data generator (oracle datasets)
    pruning     standard and physics-guided sensitivity pruning
    search      lambda/alpha grid search
    evaluation  NRMSE metrics, variant comparison, noise-robustness sweep
    model_io    checksummed single-file model container
    cli         command-line pipeline orchestration
"""

from . import (cli, dataset, evaluation, model_io, nn_core, physics, pruning,
               search, synth)
from .dataset import DataBundle, MinMaxScaler, RawSeries, SupervisedSet
from .nn_core import Mlp, TrainConfig
from .physics import CompositeLossConfig, TargetLayout

__version__ = "0.1.0"

__all__ = [
    "cli", "dataset", "evaluation", "model_io", "nn_core", "physics",
    "pruning", "search", "synth",
    "DataBundle", "MinMaxScaler", "RawSeries", "SupervisedSet",
    "Mlp", "TrainConfig", "CompositeLossConfig", "TargetLayout",
    "__version__",
]
