"""Finite-difference checks of every network block.

Each entry in ``BLOCKS`` builds a small float64 instance of one block and
returns the function and tensors to hand to ``grad_check``. Blocks are
built through module attributes at call time, so replacing a function
(for example ``htmnet.decoder.channel_shuffle``) affects every block that
uses it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import decoder, fusion, losses, model, ssm
from .autodiff import Tensor, grad_check, precision
from .config import RunConfig, tiny_run_config

TOLERANCE = 1e-4
BLOCK_DIM = 16
SAMPLES = 24          # coordinates probed per tensor
MODEL_SAMPLES = 6     # the full network is costlier per probe


@dataclass
class BlockResult:
    name: str
    error: float
    seconds: float
    message: str = ""

    @property
    def passed(self) -> bool:
        return not self.message and self.error <= TOLERANCE


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), dtype=np.float64)


def _with_params(module, inputs):
    """Inputs first, then every parameter of ``module``."""
    return list(inputs) + module.parameters()


def _additive_fuse(cfg, rng):
    a, b = _rand(rng, 2, BLOCK_DIM, 3, 3), _rand(rng, 2, BLOCK_DIM, 3, 3)
    return (lambda x, y: fusion.additive_fuse(x, y)), [a, b]


def _mha(cfg, rng):
    m = fusion.MHABlock(BLOCK_DIM, cfg.model.bfm.num_heads, rng)
    return (lambda x, *p: m(x)), _with_params(m, [_rand(rng, 2, 9, BLOCK_DIM)])


def _mamba(cfg, rng):
    s = cfg.model.ssm
    m = ssm.MambaBlock(BLOCK_DIM, rng, expand=s.expand, state_size=s.state_size, conv_width=s.conv_width,
                       selective=s.selective)
    return (lambda x, *p: m(x)), _with_params(m, [_rand(rng, 2, 9, BLOCK_DIM)])


def _mlp(cfg, rng):
    m = fusion.MLPBlock(BLOCK_DIM, cfg.model.bfm.mlp_ratio, rng)
    return (lambda x, *p: m(x)), _with_params(m, [_rand(rng, 2, 9, BLOCK_DIM)])


def _bfm(cfg, rng):
    m = fusion.BottleneckFusion(BLOCK_DIM, cfg.model.bfm, cfg.model.ssm, rng)
    inputs = [_rand(rng, 1, BLOCK_DIM, 3, 3), _rand(rng, 1, BLOCK_DIM, 3, 3)]
    return (lambda a, b, *p: m(a, b)), _with_params(m, inputs)


def _spatial_attention(cfg, rng):
    m = decoder.SpatialAttention(rng)
    return (lambda x, *p: m(x)), _with_params(m, [_rand(rng, 2, 8, 6, 6)])


def _channel_attention(cfg, rng):
    m = decoder.ChannelAttention(BLOCK_DIM, rng, cfg.model.decoder.squeeze_ratio)
    return (lambda x, *p: m(x)), _with_params(m, [_rand(rng, 2, BLOCK_DIM, 5, 5)])


def _channel_shuffle(cfg, rng):
    return (lambda x: decoder.channel_shuffle(x, 2)), [_rand(rng, 2, 8, 3, 3)]


def _msfm(cfg, rng):
    m = decoder.MSFM(BLOCK_DIM, rng, cfg.model.decoder.squeeze_ratio)
    inputs = [_rand(rng, 1, BLOCK_DIM, 4, 4), _rand(rng, 1, BLOCK_DIM // 2, 8, 8)]
    return (lambda f, g, *p: m(f, g)), _with_params(m, inputs)


def _full_model(cfg, rng):
    net = model.HTMNet(cfg.model, seed=cfg.train.seed)
    # the output layer starts at zero, which would hide every upstream gradient
    net.decoder.head_out.weight.data = rng.uniform(-0.5, 0.5, size=net.decoder.head_out.weight.shape)
    size = model.PAD_MULTIPLE
    rgb = _rand(rng, 1, 3, size, size, low=0.0, high=1.0)
    depth = _rand(rng, 1, 1, size, size, low=0.5, high=3.0)
    gt = depth.data + rng.uniform(-0.2, 0.2, size=depth.shape)
    mask = rng.uniform(size=depth.shape) < 0.3
    params = net.parameters()
    picked = [params[i] for i in np.linspace(0, len(params) - 1, 12).round().astype(int)]

    def f(r, d, *p):
        return losses.depth_loss(net(r, d), gt, mask, cfg.loss)
    return f, [rgb, depth] + picked


BLOCKS: dict[str, Callable] = {
    "additive_fuse": _additive_fuse,
    "mha_block": _mha,
    "mamba_block": _mamba,
    "mlp_block": _mlp,
    "bfm": _bfm,
    "spatial_attention": _spatial_attention,
    "channel_attention": _channel_attention,
    "channel_shuffle": _channel_shuffle,
    "msfm": _msfm,
    "model_and_loss": _full_model,
}


def check_block(name: str, cfg: RunConfig | None = None, seed: int = 0) -> BlockResult:
    """Check one block in float64, whatever ``cfg.precision`` says."""
    cfg = cfg if cfg is not None else tiny_run_config()
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    try:
        with precision(np.float64):
            f, inputs = BLOCKS[name](cfg, rng)
            samples = MODEL_SAMPLES if name == "model_and_loss" else SAMPLES
            error = grad_check(f, inputs, eps=1e-6, samples=samples, seed=seed)
    except Exception as exc:  # a crashing block is reported, not propagated
        return BlockResult(name, float("nan"), time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
    return BlockResult(name, error, time.perf_counter() - start)


def run_all(cfg: RunConfig | None = None, names=None, report=None) -> list[BlockResult]:
    results = []
    for name in names or BLOCKS:
        result = check_block(name, cfg)
        results.append(result)
        if report is not None:
            status = "PASS" if result.passed else "FAIL"
            detail = result.message or f"max_rel_error={result.error:.3e}"
            report(f"{status} {name} {detail} ({result.seconds:.1f}s)")
    return results
