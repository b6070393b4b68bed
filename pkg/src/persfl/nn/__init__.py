"""Dense-tensor math, reverse-mode autodiff, MLP layers, losses and SGD."""
from .backend import (available_backends, get_backend, objective_loss, set_backend,
                      train_epochs, use_backend)
from .functional import LOG_CLAMP, cross_entropy, kl_div, soft_cross_entropy, softmax_t
from .model import (Hyper, ModelParams, forward, forward_tensor, init_params, sgd_step,
                    watch)
from .tensor import GradTape, Tensor, backward

__all__ = [
    "GradTape", "Hyper", "LOG_CLAMP", "ModelParams", "Tensor", "available_backends",
    "backward", "cross_entropy", "forward", "forward_tensor", "get_backend", "init_params",
    "kl_div", "objective_loss", "set_backend", "sgd_step", "soft_cross_entropy",
    "softmax_t", "train_epochs", "use_backend", "watch",
]
