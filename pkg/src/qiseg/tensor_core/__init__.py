"""Dense tensor numerics with forward/backward pairs and a small autograd graph."""
from . import autograd, io, ops
from .autograd import (Var, activation, as_var, backward, bilinear_resize, conv2d, dense,
                       global_avg_pool, param, relu, sigmoid)

__all__ = [
    "Var", "activation", "as_var", "autograd", "backward", "bilinear_resize", "conv2d",
    "dense", "global_avg_pool", "io", "ops", "param", "relu", "sigmoid",
]
