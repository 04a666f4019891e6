"""Training loss (weighted MSE + normal smoothness) and evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .autodiff import Tensor, as_tensor

DELTA_THRESHOLDS = (1.05, 1.10, 1.25)


@dataclass
class LossConfig:
    alpha: float = 0.01
    mask_weight: float = 1.0
    background_weight: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.mask_weight, self.background_weight) < 0:
            raise ValueError("loss weights must be non-negative")


def _image_gradient(d, axis: int) -> Tensor:
    """Central differences inside, one-sided at the two borders."""
    n = d.shape[axis]
    if n < 2:
        return ops.mul(d, 0.0)

    def sl(a, b):
        index = [slice(None)] * d.ndim
        index[axis] = slice(a, b)
        return d[tuple(index)]

    first = ops.sub(sl(1, 2), sl(0, 1))
    last = ops.sub(sl(n - 1, n), sl(n - 2, n - 1))
    if n == 2:
        return ops.concat([first, last], axis=axis)
    inner = ops.mul(ops.sub(sl(2, n), sl(0, n - 2)), 0.5)
    return ops.concat([first, inner, last], axis=axis)


def normals_from_depth(depth) -> Tensor:
    """Unit normals normalize([-dD/dx, -dD/dy, 1]) of an N x 1 x H x W map."""
    depth = as_tensor(depth)
    gx = _image_gradient(depth, 3)
    gy = _image_gradient(depth, 2)
    inv_norm = ops.div(1.0, ops.sqrt(ops.add(ops.add(ops.square(gx), ops.square(gy)), 1.0)))
    return ops.concat([ops.mul(ops.neg(gx), inv_norm), ops.mul(ops.neg(gy), inv_norm), inv_norm], axis=1)


def pixel_weights(gt: np.ndarray, mask: np.ndarray, cfg: LossConfig) -> np.ndarray:
    w = np.where(mask > 0, cfg.mask_weight, cfg.background_weight)
    return np.where(gt > 0, w, 0.0)


def depth_loss(pred, gt: np.ndarray, mask: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """sum w (D - D*)^2 / sum w  +  alpha * sum w (1 - <V, V*>) / sum w."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape or np.shape(mask) != gt.shape:
        raise ValueError(f"loss: prediction {pred.shape}, target {gt.shape}, mask {np.shape(mask)} differ")
    weights = pixel_weights(gt, np.asarray(mask), cfg)
    total = weights.sum()
    if total <= 0:
        raise ValueError("loss: all pixel weights are zero")
    w = Tensor(weights / total, dtype=pred.dtype)
    mse = ops.sum(ops.mul(w, ops.square(ops.sub(pred, gt))))
    if cfg.alpha == 0:
        return mse
    v_pred = normals_from_depth(pred)
    v_gt = normals_from_depth(Tensor(gt, dtype=pred.dtype)).data
    # 1 - <V, V*> written as |V - V*|^2 / 2 (equal for unit vectors), so a
    # perfect prediction gives exactly zero instead of rounding residue
    diff = ops.sub(v_pred, v_gt)
    one_minus_cos = ops.mul(ops.sum(ops.mul(diff, diff), axis=1, keepdims=True), 0.5)
    smooth = ops.sum(ops.mul(w, one_minus_cos))
    return ops.add(mse, ops.mul(smooth, cfg.alpha))


@dataclass
class MetricReport:
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float
    pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluation_mask(gt: np.ndarray, mask: np.ndarray, scope: str = "mask") -> np.ndarray:
    if scope not in ("mask", "all"):
        raise ValueError(f"metrics scope must be 'mask' or 'all', got {scope!r}")
    valid = np.asarray(gt) > 0
    return valid & (np.asarray(mask) > 0) if scope == "mask" else valid


def metrics(pred, gt, mask, scope: str = "mask") -> MetricReport:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    sel = evaluation_mask(gt, mask, scope)
    if not sel.any():
        raise ValueError("metrics: no pixels to evaluate")
    d, t = pred[sel], gt[sel]
    err = d - t
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d / t, t / d)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    deltas = [100.0 * float(np.mean(ratio < th)) for th in DELTA_THRESHOLDS]
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err * err))),
        rel=float(np.mean(np.abs(err) / t)),
        mae=float(np.mean(np.abs(err))),
        delta_105=deltas[0], delta_110=deltas[1], delta_125=deltas[2],
        pixel_count=int(sel.sum()),
    )


def error_map(pred, gt, mask, cap: float = 0.25) -> np.ndarray:
    """|D - D*| / D*, saturated at ``cap`` and scaled to 0..255 on mask pixels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    sel = evaluation_mask(gt, mask, "mask")
    rel = np.zeros_like(gt)
    rel[sel] = np.abs(pred[sel] - gt[sel]) / gt[sel]
    scaled = np.rint(np.minimum(rel, cap) / cap * 255.0)
    return np.where(sel, scaled, 0).astype(np.uint8)
