"""Parameterized layers: seeded initialization plus thin call wrappers.

A layer owns its `Parameter` objects (named "<layer>.weight" and
"<layer>.bias") and applies the matching engine operation. Weights draw from
a uniform Glorot range, biases start at zero, and channel scales start at the
identity, all from the rng passed by the model builder so construction order
fixes the initialization.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Parameter


def glorot_uniform(rng, shape, dtype):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) for a conv filter bank."""
    receptive = int(np.prod(shape[2:]))
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ConvLayer:
    """Square odd-kernel convolution with bias."""

    def __init__(self, name, in_channels, out_channels, kernel, rng,
                 stride=1, pad=0, dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(
            f"{name}.weight",
            glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, out_channels, 1, 1), dtype))

    def __call__(self, x):
        return engine.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def params(self):
        return [self.weight, self.bias]


class PointwiseLayer(ConvLayer):
    """1x1 convolution: per-pixel channel mixing."""

    def __init__(self, name, in_channels, out_channels, rng, dtype=np.float32):
        super().__init__(name, in_channels, out_channels, 1, rng, dtype=dtype)

    def __call__(self, x):
        return engine.pointwise_conv(x, self.weight, self.bias)


class ChannelScale:
    """Learned per-channel scale and shift, initialized to the identity."""

    def __init__(self, name, channels, dtype=np.float32):
        self.name = name
        self.weight = Parameter(f"{name}.weight", np.ones((1, channels, 1, 1), dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, channels, 1, 1), dtype))

    def __call__(self, x):
        return engine.depthwise_scale(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]
