"""Bottleneck fusion: add the two modality maps, serialize them to a token
sequence, and run stacked [self-attention -> Mamba -> MLP] units.

Attention and MLP blocks are post-norm (``LN(x + f(x))``). Tokens are
serialized in row-major raster order with W fastest; no positional
encoding is added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ShapeError, Tensor
from .nn import LayerNorm, Linear, Module, ModuleList
from .ssm import MambaBlock


@dataclass
class BfmConfig:
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    scan_order: str = "row_major"
    mamba_residual: bool = False


@dataclass
class SsmConfig:
    state_size: int = 16
    expand: int = 2
    conv_width: int = 4
    selective: bool = True


def additive_fuse(x_r, x_d) -> Tensor:
    if x_r.shape != x_d.shape:
        raise ShapeError(f"additive_fuse: shapes {x_r.shape} and {x_d.shape} differ")
    return ops.add(x_r, x_d)


def serialize(x) -> Tensor:
    """N x C x H x W -> N x (H*W) x C, row-major."""
    n, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def deserialize(tokens, height: int, width: int) -> Tensor:
    n, length, c = tokens.shape
    if length != height * width:
        raise ShapeError(f"deserialize: {length} tokens cannot fill {height}x{width}")
    return ops.transpose(ops.reshape(tokens, (n, height, width, c)), (0, 3, 1, 2))


def attention(x, q_proj, k_proj, v_proj, o_proj, heads: int, bias=None):
    """Multi-head scaled dot-product self-attention over axis 1 of (B, L, C).

    ``bias`` is added to the logits (broadcast to B x heads x L x L).
    Returns the projected output and the attention weights array.
    """
    b, length, c = x.shape
    if c % heads:
        raise ShapeError(f"attention: {c} channels not divisible by {heads} heads")
    dh = c // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q_proj(x)), split(k_proj(x)), split(v_proj(x))
    logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if bias is not None:
        logits = ops.add(logits, bias)
    weights = ops.softmax(logits, axis=-1)
    out = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, length, c))
    return o_proj(out), weights.data


class MHABlock(Module):
    """LN(x + MHA(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"MHA: {dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.last_attention = None

    def forward(self, x):
        attn, self.last_attention = attention(x, self.q, self.k, self.v, self.o, self.heads)
        return self.norm(ops.add(x, attn))


class MLPBlock(Module):
    """LN(x + W2 GELU(W1 x))."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, ratio * dim, rng)
        self.fc2 = Linear(ratio * dim, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, x):
        return self.norm(ops.add(x, self.fc2(ops.gelu(self.fc1(x)))))


class FusionUnit(Module):
    """One attention -> Mamba -> MLP stage on a token sequence."""

    def __init__(self, dim: int, cfg: BfmConfig, ssm: SsmConfig, rng: np.random.Generator):
        self.mamba_residual = cfg.mamba_residual
        self.mha = MHABlock(dim, cfg.num_heads, rng)
        self.mamba = MambaBlock(dim, rng, expand=ssm.expand, state_size=ssm.state_size,
                                conv_width=ssm.conv_width, selective=ssm.selective)
        self.mlp = MLPBlock(dim, cfg.mlp_ratio, rng)

    def forward(self, tokens):
        tokens = self.mha(tokens)
        mixed = self.mamba(tokens)
        tokens = ops.add(tokens, mixed) if self.mamba_residual else mixed
        return self.mlp(tokens)


class BottleneckFusion(Module):
    def __init__(self, dim: int, cfg: BfmConfig, ssm: SsmConfig, rng: np.random.Generator):
        if cfg.scan_order != "row_major":
            raise ValueError(f"unsupported scan order {cfg.scan_order!r}")
        self.blocks = ModuleList(FusionUnit(dim, cfg, ssm, rng) for _ in range(cfg.num_blocks))

    def forward(self, x_r, x_d):
        fused = additive_fuse(x_r, x_d)
        if not len(self.blocks):
            return fused
        _, _, h, w = fused.shape
        tokens = serialize(fused)
        for block in self.blocks:
            tokens = block(tokens)
        return deserialize(tokens, h, w)
