"""Training loop, evaluation and throughput measurement.

``evaluate`` is the single code path behind both the per-epoch log and
the ``eval`` command, so a checkpoint evaluated on its own training set
reproduces the last logged line.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import NonFiniteError, Tape, Tensor, precision
from .config import RunConfig, format_config
from .losses import MetricReport, depth_loss, metrics
from .model import HTMNet
from .optim import AdamW

LOG_HEADER = "epoch,loss,rmse,rel,mae,d105,d110,d125"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.txt"
FINAL_NAME = "final.htmn"
BEST_NAME = "best.htmn"
EVAL_CHUNK = 8


@dataclass
class Batch:
    """Stacked network inputs and targets: rgb N x 3 x H x W in [0, 1],
    depth and gt N x 1 x H x W meters, mask N x 1 x H x W bool."""
    rgb: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.rgb.shape[0]

    def take(self, index) -> "Batch":
        return Batch(self.rgb[index], self.depth[index], self.gt[index], self.mask[index])


def stack_samples(samples, dtype=np.float32) -> Batch:
    if not samples:
        raise ValueError("no samples to stack")
    return Batch(rgb=np.stack([s.rgb for s in samples]).astype(dtype) / dtype(255.0),
                 depth=np.stack([s.depth_raw for s in samples])[:, None].astype(dtype),
                 gt=np.stack([s.depth_gt for s in samples])[:, None].astype(dtype),
                 mask=np.stack([s.mask for s in samples])[:, None].astype(bool))


def forward_all(model: HTMNet, batch: Batch, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Unclamped tape-free forward over the batch in fixed-size chunks."""
    outs = [model(Tensor(batch.rgb[i:i + chunk]), Tensor(batch.depth[i:i + chunk])).data
            for i in range(0, len(batch), chunk)]
    return np.concatenate(outs, axis=0)


def evaluate(model: HTMNet, batch: Batch, cfg: RunConfig, scope: str | None = None):
    """Return (loss, MetricReport): loss on the raw output, metrics on the clamped prediction."""
    out = forward_all(model, batch)
    loss = float(depth_loss(Tensor(out), batch.gt, batch.mask, cfg.loss).data)
    pred = np.clip(out, 0.0, model.cfg.d_max)
    return loss, metrics(pred, batch.gt, batch.mask, scope or cfg.metrics.scope)


def format_log_line(epoch: int, loss: float, report: MetricReport) -> str:
    values = (loss, report.rmse, report.rel, report.mae, report.delta_105, report.delta_110, report.delta_125)
    return ",".join([str(epoch)] + [repr(float(v)) for v in values])


def parse_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path}: unexpected log header")
    keys = LOG_HEADER.split(",")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in zip(keys, line.split(","))}
            for line in lines[1:]]


def measure_throughput(model: HTMNet, batch: Batch, repeats: int = 3) -> float:
    """Inference images per second, best of ``repeats`` passes."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        forward_all(model, batch)
        best = min(best, time.perf_counter() - start)
    return len(batch) / best


@dataclass
class TrainResult:
    model: HTMNet
    steps: int
    final: MetricReport
    best_rmse: float
    seconds: float


def build_model(cfg: RunConfig) -> HTMNet:
    with precision(_dtype(cfg)):
        return HTMNet(cfg.model, seed=cfg.train.seed)


def _snapshot(model: HTMNet) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.precision == "f64" else np.float32


def train(cfg: RunConfig, samples, out_dir, log=None) -> TrainResult:
    """Train on ``samples`` and write log, checkpoints and config to ``out_dir``.

    Epoch 0 of the log is the untrained model. Each later line evaluates
    the whole training set after that epoch. ``log`` receives progress
    strings. The best checkpoint (lowest RMSE, epoch 0 included) is
    kept in memory and written with the final one at the end.
    """
    cfg.validate()
    dtype = _dtype(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with precision(dtype):
        data = stack_samples(samples, dtype)
        model = HTMNet(cfg.model, seed=cfg.train.seed)
        t = cfg.train
        opt = AdamW(model.named_parameters(), lr=t.lr, betas=(t.beta1, t.beta2), weight_decay=t.weight_decay,
                    clip_norm=t.grad_clip)
        order_rng = np.random.default_rng(t.seed)
        with open(os.path.join(out_dir, CONFIG_NAME), "w", encoding="utf-8") as f:
            f.write(format_config(cfg))
        log_path = os.path.join(out_dir, LOG_NAME)
        start = time.perf_counter()
        loss, report = evaluate(model, data, cfg)
        best, best_state = report.rmse, _snapshot(model)
        with open(log_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(LOG_HEADER + "\n" + format_log_line(0, loss, report) + "\n")
        steps = 0
        for epoch in range(1, t.epochs + 1):
            order = order_rng.permutation(len(data))
            for i in range(0, len(data), t.batch_size):
                batch = data.take(order[i:i + t.batch_size])
                opt.zero_grad()
                with Tape() as tape:
                    out = model(batch.rgb, batch.depth)
                    batch_loss = depth_loss(out, batch.gt, batch.mask, cfg.loss)
                tape.backward(batch_loss)
                opt.step()
                steps += 1
                if t.max_steps and steps >= t.max_steps:
                    break
            loss, report = evaluate(model, data, cfg)
            if not np.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch}: evaluation loss is non-finite")
            with open(log_path, "a", encoding="utf-8", newline="\n") as f:
                f.write(format_log_line(epoch, loss, report) + "\n")
            if log is not None:
                log(f"epoch {epoch} loss {loss:.6g} rmse {report.rmse:.4g} d105 {report.delta_105:.4f}")
            if report.rmse < best:
                best, best_state = report.rmse, _snapshot(model)
            if t.max_steps and steps >= t.max_steps:
                break
        checkpoint.save_model(os.path.join(out_dir, FINAL_NAME), model)
        checkpoint.save(os.path.join(out_dir, BEST_NAME), best_state)
        return TrainResult(model, steps, report, best, time.perf_counter() - start)
