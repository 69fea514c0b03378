"""Minimal dense-tensor autodiff used by every learnable block."""

from .core import (
    Tape,
    Tensor,
    active_tape,
    add,
    concat,
    gathered_linear,
    gelu,
    getitem,
    linear,
    matmul,
    mean_all,
    mse,
    mul,
    recording,
    reshape,
    scale,
    segment_mean,
    segment_sum,
    square,
    sub,
    sum_all,
    take,
    tanh,
)
from .fft import fft2_real, ifft2_real, spectral_conv
from .params import Adam, ParamStore, gradient, load_params, save_params

__all__ = [
    "Adam", "ParamStore", "Tape", "Tensor", "active_tape", "add", "concat", "fft2_real",
    "gathered_linear", "gelu", "getitem", "gradient", "ifft2_real", "linear", "load_params", "matmul",
    "mean_all", "mse", "mul", "recording", "reshape", "save_params", "scale",
    "segment_mean", "segment_sum", "spectral_conv", "square", "sub", "sum_all", "take",
    "tanh",
]
