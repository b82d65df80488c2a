"""Small strided conv backbone shared by the teacher and the toy detector."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Module, Sequential, conv_bn_relu


class ConvBackbone(Module):
    """Stack of stride-2 3x3 conv + BN + ReLU blocks (total stride 2**len(channels))."""

    def __init__(self, channels: Sequence[int], rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        chans = [in_channels, *channels]
        self.blocks = Sequential(*(conv_bn_relu(a, b, rng) for a, b in zip(chans[:-1], chans[1:])))
        self.out_channels = chans[-1]
        self.stride = 2 ** len(channels)

    def forward(self, x):
        return self.blocks(x)
