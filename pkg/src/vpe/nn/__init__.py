"""Minimal NumPy layer kit with manual backward passes and Adam."""

from vpe.nn.gradcheck import GradCheckReport, check_tensors, gradient_check, relative_error
from vpe.nn.layers import (BatchNorm2d, Conv2d, Layer, LeakyReLU, Linear, Param, Reshape,
                           Sequential, Sigmoid, UpConv2d, Upsample2x, conv_output_size, kink_signature, leaky_relu,
                           sigmoid, upsample2x)
from vpe.nn.optim import Adam, AdamState, adam_step, init_params

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "GradCheckReport", "Layer", "LeakyReLU",
    "Linear", "Param", "Reshape", "Sequential", "Sigmoid", "UpConv2d", "Upsample2x", "adam_step",
    "check_tensors", "conv_output_size", "gradient_check", "init_params", "kink_signature", "leaky_relu",
    "relative_error", "sigmoid", "upsample2x",
]
