"""The full depth-completion network and its configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor, as_tensor
from .decoder import Decoder
from .encoders import DualEncoder, EncoderConfig
from .fusion import BfmConfig, BottleneckFusion, FusionUnit, SsmConfig, deserialize, serialize
from .nn import Module, ModuleList

FUSION_MODES = ("bottleneck", "layerwise")
PAD_MULTIPLE = 32
GUIDANCE_CHANNELS = 5   # rgb, normalized depth, valid-depth indicator


@dataclass
class DecoderConfig:
    msfm: bool = True
    squeeze_ratio: int = 4
    guidance: bool = True
    head_layers: int = 1


@dataclass
class FusionConfig:
    mode: str = "bottleneck"
    bfm: bool = True

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion.mode must be one of {FUSION_MODES}, got {self.mode!r}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bfm: BfmConfig = field(default_factory=BfmConfig)
    ssm: SsmConfig = field(default_factory=SsmConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    d_max: float = 10.0


def tiny_config() -> ModelConfig:
    """Small geometry used by the overfit, ablation and gradient-check runs."""
    return ModelConfig(encoder=EncoderConfig(stage_widths=[16, 32, 64, 128]), bfm=BfmConfig(num_blocks=2),
                       decoder=DecoderConfig(head_layers=3))


def pad_to_multiple(array: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad the trailing two axes up to a multiple of ``multiple``."""
    h, w = array.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return array
    pad = [(0, 0)] * (array.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(array, pad, mode=mode)


class HTMNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = cfg.encoder.stage_widths
        self.encoder = DualEncoder(cfg.encoder, rng)
        self.bfm = None
        self.layer_fusion = None
        if cfg.fusion.bfm and cfg.fusion.mode == "bottleneck":
            self.bfm = BottleneckFusion(widths[3], cfg.bfm, cfg.ssm, rng)
        elif cfg.fusion.bfm:
            self.layer_fusion = ModuleList(FusionUnit(w, cfg.bfm, cfg.ssm, rng) for w in widths)
        self.decoder = Decoder(widths, rng, use_msfm=cfg.decoder.msfm, ratio=cfg.decoder.squeeze_ratio,
                               guidance_channels=GUIDANCE_CHANNELS if cfg.decoder.guidance else 0,
                               head_layers=cfg.decoder.head_layers)

    def _fuse(self, rgbd, depth_n):
        if self.layer_fusion is None:
            skips, (x_r, x_d) = self.encoder(rgbd, depth_n)
            bottleneck = self.bfm(x_r, x_d) if self.bfm is not None else ops.add(x_r, x_d)
            return skips, bottleneck
        t_feats, c_feats = self.encoder.branches(rgbd, depth_n)
        fused = []
        for unit, a, b in zip(self.layer_fusion, t_feats, c_feats):
            _, _, h, w = a.shape
            fused.append(deserialize(unit(serialize(ops.add(a, b))), h, w))
        return fused[:3], fused[3]

    def forward(self, rgb, depth) -> Tensor:
        """Completed depth (meters), unclamped. ``rgb`` in [0, 1], N x 3 x H x W;
        ``depth`` N x 1 x H x W in meters. Inputs whose H or W are not
        multiples of 32 are reflect-padded (as constants) and the output
        cropped back."""
        rgb, depth = as_tensor(rgb), as_tensor(depth)
        h, w = depth.shape[-2:]
        if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
            rgb = Tensor(pad_to_multiple(rgb.data), dtype=rgb.dtype)
            depth_in = Tensor(pad_to_multiple(depth.data), dtype=depth.dtype)
        else:
            depth_in = depth
        depth_n = ops.mul(depth_in, 1.0 / self.cfg.d_max)
        rgbd = ops.concat([rgb, depth_n], axis=1)
        skips, bottleneck = self._fuse(rgbd, depth_n)
        guidance = None
        if self.cfg.decoder.guidance:
            valid = Tensor((depth_in.data > 0).astype(depth_in.dtype), dtype=depth_in.dtype)
            guidance = ops.concat([rgbd, valid], axis=1)
        residual = self.decoder(bottleneck, skips, guidance)
        if residual.shape[-2:] != (h, w):
            residual = residual[:, :, :h, :w]
        return ops.add(depth, ops.mul(residual, self.cfg.d_max))

    def predict(self, rgb: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Inference: forward without a tape, clamped to [0, d_max]."""
        out = self.forward(Tensor(rgb), Tensor(depth)).data
        return np.clip(out, 0.0, self.cfg.d_max)
