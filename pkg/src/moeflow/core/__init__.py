from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    finite_checks,
    getitem,
    grad_enabled,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    rms_norm,
    scatter_rows,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    square,
    stop_gradient,
    sub,
    swapaxes,
    transpose,
    tsum,
)
from .nn import linear, scaled_dot_attention, swiglu
from .optim import AdamW, AdamWState, adamw_step, warmup_lr
from .gradcheck import analytic_grads, check_gradients, numeric_grad, reference_grads, rel_error
