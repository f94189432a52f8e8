from .checkpoint import CheckpointError, load, loads, save, dumps
from .nn import (
    Activation,
    MlpSpec,
    ParamSet,
    clone_params,
    grad_global_norm,
    init_mlp,
    mlp_forward,
    mlp_forward_reference,
    zero_grads,
)
from .optim import OptimizerState, optimizer_step
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    elu,
    gather_last,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    square,
    sub,
    tabs,
    tanh,
    tsum,
)
