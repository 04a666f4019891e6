"""Multi-scale fusion decoder.

Each fusion step blends a deep feature ``F`` with an aligned shallower
feature ``F_hat`` through a sigmoid gate ``W``::

    X   = F + F_hat
    A   = SA(X) + CA(X)                       (broadcast to N x C x H x W)
    Xw  = shuffle([A, X], groups=2)           (2C channels)
    W   = sigmoid(reduce(dw3x3(Xw) + dw7x7(Xw)))
    out = conv1x1(W * F) + conv1x1((1 - W) * F_hat)

``reduce`` is a pointwise 2C -> C convolution so the gate matches F.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, Module, ModuleList


def channel_shuffle(x, groups: int) -> Tensor:
    """View channels as groups x (C/groups), transpose, flatten."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"channel_shuffle: {groups} groups do not divide {c} channels")
    x = ops.reshape(x, (n, groups, c // groups, h, w))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (n, c, h, w))


def align(f_prev, channels: int, height: int, width: int) -> Tensor:
    """Adaptive-average-pool to (height, width), then tile the channel block."""
    n, c_prev, h_prev, w_prev = f_prev.shape
    if channels % c_prev:
        raise ShapeError(f"align: {channels} channels are not a multiple of {c_prev}")
    if height > h_prev or width > w_prev:
        raise ShapeError(f"align: cannot pool {h_prev}x{w_prev} up to {height}x{width}")
    x = f_prev
    if (h_prev, w_prev) != (height, width):
        x = ops.adaptive_avg_pool2d(x, (height, width))
    k = channels // c_prev
    return ops.concat([x] * k, axis=1) if k > 1 else x


class SpatialAttention(Module):
    """7x7 conv over the per-pixel [channel max, channel mean] pair; no activation."""

    def __init__(self, rng: np.random.Generator):
        self.conv = Conv2d(2, 1, 7, rng, padding=3)

    def forward(self, x):
        return self.conv(ops.concat([ops.channel_max(x), ops.channel_mean(x)], axis=1))


class ChannelAttention(Module):
    """GAP -> 1x1 conv (C -> C/r) -> ReLU -> 1x1 conv (C/r -> C); no activation."""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4):
        if channels % ratio:
            raise ShapeError(f"channel attention: {channels} channels not divisible by ratio {ratio}")
        self.squeeze = Conv2d(channels, channels // ratio, 1, rng)
        self.excite = Conv2d(channels // ratio, channels, 1, rng)

    def forward(self, x):
        return self.excite(ops.relu(self.squeeze(ops.global_avg_pool2d(x))))


class MSFM(Module):
    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4, shuffle_groups: int = 2):
        self.shuffle_groups = shuffle_groups
        self.sa = SpatialAttention(rng)
        self.ca = ChannelAttention(channels, rng, ratio)
        self.dw3 = Conv2d(2 * channels, 2 * channels, 3, rng, padding=1, groups=2 * channels)
        self.dw7 = Conv2d(2 * channels, 2 * channels, 7, rng, padding=3, groups=2 * channels)
        self.reduce = Conv2d(2 * channels, channels, 1, rng)
        self.out_deep = Conv2d(channels, channels, 1, rng)
        self.out_shallow = Conv2d(channels, channels, 1, rng)
        self.last_gate = None

    def gate(self, f, f_hat) -> Tensor:
        x = ops.add(f, f_hat)
        a = ops.add(self.sa(x), self.ca(x))
        xw = channel_shuffle(ops.concat([a, x], axis=1), self.shuffle_groups)
        return ops.sigmoid(self.reduce(ops.add(self.dw3(xw), self.dw7(xw))))

    def forward(self, f, f_prev):
        _, c, h, w = f.shape
        f_hat = align(f_prev, c, h, w)
        gate = self.gate(f, f_hat)
        self.last_gate = gate.data
        return ops.add(self.out_deep(ops.mul(gate, f)),
                       self.out_shallow(ops.mul(ops.sub(1.0, gate), f_hat)))


class UpStep(Module):
    """Bilinear x2, 3x3 conv + ReLU to the next width, then fuse with the skip."""

    def __init__(self, in_ch: int, out_ch: int, rng, use_msfm: bool, ratio: int):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.msfm = MSFM(out_ch, rng, ratio) if use_msfm else None

    def forward(self, x, skip):
        x = ops.relu(self.conv(ops.upsample_bilinear(x, 2)))
        if self.msfm is not None:
            return self.msfm(x, skip)
        _, c, h, w = x.shape
        return ops.add(x, align(skip, c, h, w))


class Decoder(Module):
    """Three fusion steps up to stride 4, then a x4 head predicting a depth residual.

    The final 1x1 convolution starts at zero, so a freshly built network
    returns its input depth unchanged.
    """

    def __init__(self, stage_widths, rng: np.random.Generator, use_msfm: bool = True, ratio: int = 4,
                 guidance_channels: int = 0, head_layers: int = 1):
        if head_layers < 1:
            raise ValueError("the head needs at least one convolution")
        w = list(stage_widths)
        self.steps = ModuleList(UpStep(w[i + 1], w[i], rng, use_msfm, ratio) for i in (2, 1, 0))
        self.head_conv = Conv2d(w[0] + guidance_channels, w[0], 3, rng, padding=1)
        self.head_refine = ModuleList(Conv2d(w[0], w[0], 3, rng, padding=1) for _ in range(head_layers - 1))
        self.head_out = Conv2d(w[0], 1, 1, rng)
        self.head_out.weight.data[...] = 0.0

    def forward(self, bottleneck, skips, guidance=None):
        """``guidance`` (optional, full resolution) is concatenated to the
        upsampled features before the head convolution."""
        x = bottleneck
        for step, skip in zip(self.steps, reversed(skips)):
            x = step(x, skip)
        x = ops.upsample_bilinear(x, 4)
        if guidance is not None:
            x = ops.concat([x, guidance], axis=1)
        x = ops.relu(self.head_conv(x))
        for conv in self.head_refine:
            x = ops.relu(conv(x))
        return self.head_out(x)
