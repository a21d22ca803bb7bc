"""Small reverse-mode differentiation engine and neural layers."""
from .tensor import Parameter, Tape, Tensor, backward
from .nn import MLP, Adam, Embedding, GRUCell, Linear, Module, adam_update, gru_step, mlp_apply

__all__ = [
    "Adam",
    "Embedding",
    "GRUCell",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_update",
    "backward",
    "gru_step",
    "mlp_apply",
]
