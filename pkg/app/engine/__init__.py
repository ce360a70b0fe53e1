from app.engine.gradcheck import GradCheckReport, ParameterCheck, grad_check
from app.engine.module import Linear, Module, parameter
from app.engine.rng import Rng
from app.engine.tensor import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    dropout,
    elementwise,
    getitem,
    make_op,
    matmul,
    no_grad,
    pad,
    reduce,
    reshape,
    take,
    transpose,
    unbroadcast,
)
