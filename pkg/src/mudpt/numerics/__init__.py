"""Float64 tensor algebra, reverse-mode autodiff, optimizers and gradient checking."""

from .gradcheck import grad_check
from .nn import LN_EPS, AttentionParams, layer_norm, multi_head_attention, softmax
from .optim import SGD, Adam, SgdSchedule, sgd_step
from .tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    log_softmax,
    no_grad,
    stack,
)

__all__ = [
    "Adam", "AttentionParams", "LN_EPS", "SGD", "SgdSchedule", "Tensor", "as_tensor",
    "broadcast_to", "concat", "gelu", "grad_check", "layer_norm", "log_softmax",
    "multi_head_attention", "no_grad", "sgd_step", "softmax", "stack",
]
