from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .module import Module, Parameter
from .optim import OptimizerState, adam_step, clip_grad_norm, inverse_sqrt_lr
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    depthwise_conv1d,
    embedding,
    exp,
    glu,
    index,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    make_op,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    silu,
    softmax,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
