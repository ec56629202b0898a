"""Once-for-all quantization-aware training."""
from .loop import (
    AscendingResult,
    TrainConfig,
    TrainResult,
    evaluate_levels,
    forward_all,
    pretrain_fp,
    train_ascending_baseline,
    train_joint,
)
from .moo import combine_us, self_kd_loss, solve_min_norm
from .optim import SGD, cosine_lr, sgd_step
from .params import FPParams, SourceParams, init_params, to_layered
from .ste import step_size_grad, ste_weight_grad
from .tape import Tape, Var

__all__ = [
    "AscendingResult", "FPParams", "SGD", "SourceParams", "Tape", "TrainConfig", "TrainResult", "Var",
    "combine_us", "cosine_lr", "evaluate_levels", "forward_all", "init_params", "pretrain_fp",
    "self_kd_loss", "sgd_step", "solve_min_norm", "step_size_grad", "ste_weight_grad",
    "to_layered", "train_ascending_baseline", "train_joint",
]
