"""Federated estimation of causal effects with random Fourier feature models."""
from __future__ import annotations

from . import kernels
from .data import SourceDataset, load_csv_source, make_benchmark
from .effects import cate, estimate_effects, global_ate, local_ate, sample_z_given_x
from .errors import CausalRFFError
from .federation import run_training
from .metrics import (ate_error, minimax_bound_latent, minimax_bound_outcome,
                      minimax_bound_propensity, pehe)
from .model import GlobalModel, Hyperparams, init_model
from .rff import FourierBasis, feature_map, sample_basis
from .training import local_gradient, local_objective, train_centralized

__version__ = "0.1.0"

__all__ = [
    "kernels", "SourceDataset", "load_csv_source", "make_benchmark", "cate", "estimate_effects",
    "global_ate", "local_ate", "sample_z_given_x", "CausalRFFError", "run_training", "ate_error",
    "minimax_bound_latent", "minimax_bound_outcome", "minimax_bound_propensity", "pehe",
    "GlobalModel", "Hyperparams", "init_model", "FourierBasis", "feature_map", "sample_basis",
    "local_gradient", "local_objective", "train_centralized",
]
