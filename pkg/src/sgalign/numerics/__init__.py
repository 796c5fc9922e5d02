from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import check_gradients
from .optim import OptimizerState, adamw_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    detach,
    div,
    exp,
    grad_enabled,
    index,
    layer_norm,
    leaky_relu,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    max_reduce,
    mean_reduce,
    mul,
    neg,
    no_grad,
    precision,
    relu,
    reshape,
    scatter_rows,
    softmax,
    sqrt,
    stack,
    sub,
    sum_reduce,
    take_rows,
    transpose,
)
