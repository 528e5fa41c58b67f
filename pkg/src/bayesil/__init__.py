"""Bayesian incremental learning with variational posteriors on a small numpy autodiff engine."""

from .architectures import build_model, rebuild
from .autodiff import Tensor, grad_check, no_grad
from .data import Dataset, ShardedDataset, gen_synthetic, label_split, load_idx, mnist_subset, split_shards, train_test_split
from .laplace import LaplaceConfig, build_pretrained_prior, grid_search_sigma, laplace_fit_sigma, train_map
from .layers import BayesNet, PriorSnapshot, layer_kl, mnf_joint_kl_estimate, mnf_kl_draws
from .persistence import load_checkpoint, read_metrics, save_checkpoint, write_metrics
from .training import ElboConfig, IncrementalLearner, StageMetrics, TrainConfig, elbo_minibatch, fit, incremental_fit, predict_avg

__all__ = [
    "BayesNet",
    "Dataset",
    "ElboConfig",
    "IncrementalLearner",
    "LaplaceConfig",
    "PriorSnapshot",
    "ShardedDataset",
    "StageMetrics",
    "Tensor",
    "TrainConfig",
    "build_model",
    "build_pretrained_prior",
    "elbo_minibatch",
    "fit",
    "gen_synthetic",
    "grad_check",
    "grid_search_sigma",
    "incremental_fit",
    "label_split",
    "laplace_fit_sigma",
    "layer_kl",
    "load_checkpoint",
    "load_idx",
    "mnf_joint_kl_estimate",
    "mnf_kl_draws",
    "mnist_subset",
    "no_grad",
    "predict_avg",
    "read_metrics",
    "rebuild",
    "save_checkpoint",
    "split_shards",
    "train_map",
    "train_test_split",
    "write_metrics",
]
