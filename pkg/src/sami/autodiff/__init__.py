from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    one_hot_select,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softmax_rows,
    softplus,
    sqrt,
    tanh,
    transpose,
    tsum,
)
from .nn import Embedding, LayerNorm, Linear, Module, parameter
from .optim import AdamW, OptimizerState, ScheduleConfig, adamw_step, lr_at
from .gradcheck import check_gradients, numerical_grad, relative_error
