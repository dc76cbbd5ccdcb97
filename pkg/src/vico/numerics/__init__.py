from .tensor import (
    ShapeError,
    Tape,
    TapeNode,
    Tensor,
    add,
    add_spatial,
    backward,
    div,
    mul,
    neg,
    sub,
    concat,
    const,
    conv2d,
    deterministic_mode,
    exp,
    expand,
    get_default_dtype,
    grad_enabled,
    group_norm,
    layer_norm,
    matmul,
    max_last,
    mean_,
    no_grad,
    ones,
    reshape,
    select_last,
    select_last_per_row,
    set_default_dtype,
    silu,
    softmax_last,
    sqrt,
    sum_,
    tensor,
    thread_limit,
    trace,
    transpose,
    upsample_nearest2x,
    zeros,
)
from .gradcheck import finite_diff_grad, max_relative_error

__all__ = [name for name in dir() if not name.startswith("_")]
