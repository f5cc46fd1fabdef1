"""Bidirectional LSTMP acoustic models with layer norm and dynamic layer norm."""
from .adapt import generate_ln_params, summarize, summary_variance, variance_penalty
from .data import (Dataset, SyntheticSpec, Utterance, cluster_purity, export_summaries,
                   gen_synthetic, load_dataset, load_splits, save_dataset, save_splits)
from .estimator import DLNAcousticModel
from .norm import LnConfig, LnParams, layer_norm
from .recurrent import (AcousticModel, StackConfig, bidir_layer, count_params, format_count,
                        load_checkpoint, lstmp_step, save_checkpoint, stack_forward)
from .tensor import Tensor, backward, grad_check, no_grad
from .train import TrainConfig, evaluate, fit, frame_error_rate, init_model, nll_loss

__version__ = "0.1.0"

__all__ = [
    "AcousticModel", "DLNAcousticModel", "Dataset", "LnConfig", "LnParams", "StackConfig",
    "SyntheticSpec", "Tensor", "TrainConfig", "Utterance", "backward", "bidir_layer",
    "cluster_purity", "count_params", "evaluate", "export_summaries", "fit", "format_count",
    "frame_error_rate", "gen_synthetic", "generate_ln_params", "grad_check", "init_model",
    "layer_norm", "load_checkpoint", "load_dataset", "load_splits", "lstmp_step", "nll_loss",
    "no_grad", "save_checkpoint", "save_dataset", "save_splits", "stack_forward", "summarize",
    "summary_variance", "variance_penalty",
]
