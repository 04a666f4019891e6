"""Dual-branch encoder: a shifted-window attention branch over the RGB-D
stack and a residual CNN branch over depth, both producing four stages
at strides 4, 8, 16 and 32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor
from .fusion import attention
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList

MASK_VALUE = -1e9
PATCH_SIZE = 4


@dataclass
class EncoderConfig:
    stage_widths: list = field(default_factory=lambda: [24, 48, 96, 192])
    window_size: int = 4
    blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    resnet_blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    head_dim: int = 8

    def __post_init__(self):
        if len(self.stage_widths) != 4 or len(self.blocks_per_stage) != 4 \
                or len(self.resnet_blocks_per_stage) != 4:
            raise ValueError("encoder needs exactly four stages")
        if any(w <= 0 for w in self.stage_widths) or self.window_size <= 0:
            raise ValueError("stage widths and window size must be positive")


def window_partition(x, ws: int) -> Tensor:
    """N x H x W x C -> (N * nWin) x ws^2 x C, windows in raster order."""
    n, h, w, c = x.shape
    x = ops.reshape(x, (n, h // ws, ws, w // ws, ws, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (n * (h // ws) * (w // ws), ws * ws, c))


def window_reverse(windows, ws: int, n: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    x = ops.reshape(windows, (n, h // ws, w // ws, ws, ws, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (n, h, w, c))


def shifted_window_mask(h: int, w: int, ws: int, shift: int) -> np.ndarray:
    """Additive logit mask (nWin x ws^2 x ws^2) that blocks attention between
    tokens which were not spatial neighbours before the cyclic shift."""
    region = np.zeros((h, w), dtype=int)
    bounds = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for wsl in bounds:
            region[hs, wsl] = label
            label += 1
    ids = region.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    return np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)


class SwinBlock(Module):
    """Pre-norm window attention + MLP on channels-last tokens (N x H x W x C)."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, rng: np.random.Generator,
                 mlp_ratio: int = 4):
        self.heads, self.window, self.shifted = heads, window, shifted
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x):
        n, h, w, c = x.shape
        ws = min(self.window, h, w)
        shift = ws // 2 if self.shifted and min(h, w) > ws else 0

        y = self.norm1(x)
        # zero-pad bottom/right so the windows tile the map; cropped after attention
        ph, pw = -h % ws, -w % ws
        if ph:
            y = ops.concat([y, Tensor(np.zeros((n, ph, w, c)), dtype=x.dtype)], axis=1)
        if pw:
            y = ops.concat([y, Tensor(np.zeros((n, h + ph, pw, c)), dtype=x.dtype)], axis=2)
        h, w = h + ph, w + pw
        if shift:
            y = ops.roll(y, (-shift, -shift), axis=(1, 2))
        windows = window_partition(y, ws)
        bias = None
        if shift:
            mask = shifted_window_mask(h, w, ws, shift)
            bias = Tensor(np.tile(mask, (n, 1, 1))[:, None], dtype=x.dtype)
        out, _ = attention(windows, self.q, self.k, self.v, self.o, self.heads, bias)
        y = window_reverse(out, ws, n, h, w)
        if shift:
            y = ops.roll(y, (shift, shift), axis=(1, 2))
        if ph or pw:
            y = y[:, : h - ph, : w - pw]
        x = ops.add(x, y)
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm2(x)))))


class PatchMerging(Module):
    """2x2 neighbourhood concat -> LN -> linear, halving H and W."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, out_dim, rng, bias=False)

    def forward(self, x):
        parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduce(self.norm(ops.concat(parts, axis=-1)))


class TransformerStage(Module):
    def __init__(self, in_dim: int, dim: int, depth: int, cfg: EncoderConfig, rng, first: bool):
        if dim % cfg.head_dim:
            raise ValueError(f"stage width {dim} not divisible by head_dim {cfg.head_dim}")
        if first:
            self.embed = Conv2d(in_dim, dim, PATCH_SIZE, rng, stride=PATCH_SIZE)
            self.embed_norm = LayerNorm(dim)
        else:
            self.merge = PatchMerging(in_dim, dim, rng)
        self.first = first
        self.blocks = ModuleList(SwinBlock(dim, dim // cfg.head_dim, cfg.window_size, i % 2 == 1, rng)
                                 for i in range(depth))

    def forward(self, x):
        if self.first:
            x = self.embed_norm(ops.transpose(self.embed(x), (0, 2, 3, 1)))
        else:
            x = self.merge(x)
        for block in self.blocks:
            x = block(x)
        return x


class TransformerBranch(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_channels: int = 4):
        widths = cfg.stage_widths
        self.stages = ModuleList(
            TransformerStage(in_channels if i == 0 else widths[i - 1], widths[i], cfg.blocks_per_stage[i],
                             cfg, rng, first=i == 0)
            for i in range(4))

    def forward(self, rgbd) -> list:
        _check_input(rgbd)
        feats, x = [], rgbd
        for stage in self.stages:
            x = stage(x)
            feats.append(ops.transpose(x, (0, 3, 1, 2)))
        return feats


class BasicBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride) if stride != 1 or in_ch != out_ch else None

    def forward(self, x):
        skip = x if self.proj is None else self.proj(x)
        return ops.relu(ops.add(self.conv2(ops.relu(self.conv1(x))), skip))


class CNNBranch(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, in_channels: int = 1):
        widths = cfg.stage_widths
        self.stem = Conv2d(in_channels, widths[0], 7, rng, stride=2, padding=3)
        stages = []
        for i in range(4):
            blocks = []
            for j in range(cfg.resnet_blocks_per_stage[i]):
                in_ch = (widths[0] if i == 0 else widths[i - 1]) if j == 0 else widths[i]
                stride = 2 if i > 0 and j == 0 else 1
                blocks.append(BasicBlock(in_ch, widths[i], stride, rng))
            if not blocks:
                raise ValueError("each CNN stage needs at least one residual block")
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    def forward(self, depth) -> list:
        _check_input(depth)
        x = ops.max_pool2d(ops.relu(self.stem(depth)), 3, 2, 1)
        feats = []
        for stage in self.stages:
            for block in stage:
                x = block(x)
            feats.append(x)
        return feats


def _check_input(x) -> None:
    if x.ndim != 4 or x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeError(f"encoder input {x.shape}: H and W must be multiples of 32")


class DualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.transformer = TransformerBranch(cfg, rng)
        self.cnn = CNNBranch(cfg, rng)

    def branches(self, rgbd, depth):
        t_feats, c_feats = self.transformer(rgbd), self.cnn(depth)
        for i, (a, b) in enumerate(zip(t_feats, c_feats)):
            if a.shape != b.shape:
                raise ShapeError(f"stage {i + 1}: transformer {a.shape} vs cnn {b.shape}")
        return t_feats, c_feats

    def forward(self, rgbd, depth):
        """Return (fused stage 1-3 skips, (rgbd bottleneck, depth bottleneck))."""
        t_feats, c_feats = self.branches(rgbd, depth)
        skips = [ops.add(a, b) for a, b in zip(t_feats[:3], c_feats[:3])]
        return skips, (t_feats[3], c_feats[3])
