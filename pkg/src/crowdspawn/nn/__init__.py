"""Minimal neural building blocks: reverse-mode autodiff, GRU, MLP, Adam."""

from .autodiff import Tensor, concat, exp, log, sigmoid, softplus, tanh, value
from .layers import GRUCellSpec, MLPSpec, gru_step
from .params import ParamStore, adam_update, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "concat",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "tanh",
    "value",
    "GRUCellSpec",
    "MLPSpec",
    "gru_step",
    "ParamStore",
    "adam_update",
    "load_checkpoint",
    "save_checkpoint",
]
