"""Self-attention condenser block.

The block condenses the input to a coarser grid (max pool by the condense
factor), embeds spatial and cross-channel relationships at that resolution
(depthwise 3x3 then pointwise mixing), expands back (nearest neighbour),
and gates the input: out = V * sigmoid(A) * s with a learnable per-channel
scale s. The gate keeps |out| <= |V| * |s| elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    activation,
    depthwise_conv2d,
    mul,
    pointwise_conv2d,
    pool2d,
    upsample2d_nearest,
)

__all__ = ["AttentionCondenserParams", "ac_init", "ac_forward", "ac_param_layout", "ac_param_count"]


@dataclass
class AttentionCondenserParams:
    """Learnable state of one condenser block."""

    channels: int
    condense_factor: int
    dw_weight: Tensor  # (C,1,3,3)
    pw_weight: Tensor  # (C,C,1,1)
    pw_bias: Tensor    # (1,C,1,1)
    scale: Tensor      # (1,C,1,1), initialized to ones

    def tensors(self):
        return [
            ("dw_weight", self.dw_weight),
            ("pw_weight", self.pw_weight),
            ("pw_bias", self.pw_bias),
            ("scale", self.scale),
        ]


def ac_param_layout(channels):
    """(name, shape, init, fan_in) for each parameter, in draw order."""
    c = channels
    return [
        ("dw_weight", (c, 1, 3, 3), "he", 9),
        ("pw_weight", (c, c, 1, 1), "he", c),
        ("pw_bias", (1, c, 1, 1), "zero", 0),
        ("scale", (1, c, 1, 1), "one", 0),
    ]


def ac_param_count(channels):
    """9C + C^2 + C + C: depthwise + pointwise + pointwise bias + scale."""
    return 9 * channels + channels * channels + 2 * channels


def ac_init(channels, condense_factor=2, rng_seed=0):
    """Draw fresh block parameters: He-style weights, zero bias, unit scale."""
    if channels < 1:
        raise ConfigError(f"attention condenser: channels must be >= 1, got {channels}")
    if condense_factor < 2:
        raise ConfigError(f"attention condenser: condense_factor must be >= 2, got {condense_factor}")
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape, init, fan_in in ac_param_layout(channels):
        if init == "he":
            tensors[name] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
        elif init == "zero":
            tensors[name] = Tensor(np.zeros(shape))
        else:
            tensors[name] = Tensor(np.ones(shape))
    return AttentionCondenserParams(
        channels=channels,
        condense_factor=condense_factor,
        dw_weight=tensors["dw_weight"],
        pw_weight=tensors["pw_weight"],
        pw_bias=tensors["pw_bias"],
        scale=tensors["scale"],
    )


def ac_forward(v, params, tape=None):
    """Condense -> embed -> expand -> selective attention; shape preserving."""
    f = params.condense_factor
    n, c, h, w = v.shape
    if c != params.channels:
        raise ConfigError(f"attention condenser: input has {c} channels, block built for {params.channels}")
    if h % f or w % f:
        raise ConfigError(f"attention condenser: {h}x{w} input not divisible by condense factor {f}")
    q = pool2d(v, "max", f, f, tape=tape)
    k = depthwise_conv2d(q, params.dw_weight, None, stride=1, pad=1, tape=tape)
    k = pointwise_conv2d(k, params.pw_weight, params.pw_bias, tape=tape)
    a = upsample2d_nearest(k, f, tape=tape)
    gate = activation("sigmoid", a, tape=tape)
    return mul(mul(v, gate, tape=tape), params.scale, tape=tape)
