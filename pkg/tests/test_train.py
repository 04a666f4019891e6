import os

import numpy as np
import pytest

from htmnet import checkpoint, train as train_mod
from htmnet.autodiff import NonFiniteError
from htmnet.config import load_config, tiny_run_config
from htmnet.model import HTMNet
from htmnet.synth import dataset
from htmnet.train import (BEST_NAME, CONFIG_NAME, FINAL_NAME, LOG_HEADER, LOG_NAME, evaluate, format_log_line,
                          parse_log, stack_samples, train)


@pytest.fixture(scope="module")
def samples():
    return list(dataset(0, 4, 32))


def small_cfg(**train):
    cfg = tiny_run_config()
    cfg.train.epochs = 2
    cfg.train.batch_size = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


def read(path):
    with open(path, "rb") as f:
        return f.read()


class TestLog:
    def test_header_golden(self):
        assert LOG_HEADER == "epoch,loss,rmse,rel,mae,d105,d110,d125"

    def test_outputs_and_schema(self, samples, tmp_path):
        result = train(small_cfg(), samples, tmp_path)
        assert sorted(os.listdir(tmp_path)) == sorted([BEST_NAME, CONFIG_NAME, FINAL_NAME, LOG_NAME])
        lines = read(tmp_path / LOG_NAME).decode().splitlines()
        assert lines[0] == LOG_HEADER
        assert [row["epoch"] for row in parse_log(tmp_path / LOG_NAME)] == [0, 1, 2]
        assert all(len(line.split(",")) == 8 for line in lines)
        assert result.steps == 4

    def test_format_log_line_uses_repr(self, samples):
        from htmnet.losses import MetricReport
        line = format_log_line(3, 0.1, MetricReport(0.2, 0.3, 0.1, 50.0, 75.0, 100.0, 10))
        assert line == "3,0.1,0.2,0.3,0.1,50.0,75.0,100.0"

    def test_bad_header(self, tmp_path):
        (tmp_path / "log.csv").write_text("epoch,loss\n0,1\n")
        with pytest.raises(ValueError):
            parse_log(tmp_path / "log.csv")


class TestTraining:
    def test_zero_lr_keeps_loss(self, samples, tmp_path):
        train(small_cfg(lr=0.0, epochs=3), samples, tmp_path)
        losses = [row["loss"] for row in parse_log(tmp_path / LOG_NAME)]
        assert max(losses) - min(losses) <= 1e-7

    def test_same_seed_identical_bytes(self, samples, tmp_path):
        train(small_cfg(), samples, tmp_path / "a")
        train(small_cfg(), samples, tmp_path / "b")
        for name in (LOG_NAME, FINAL_NAME, BEST_NAME, CONFIG_NAME):
            assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)

    def test_different_seed_differs(self, samples, tmp_path):
        train(small_cfg(seed=0), samples, tmp_path / "a")
        train(small_cfg(seed=1), samples, tmp_path / "b")
        assert read(tmp_path / "a" / FINAL_NAME) != read(tmp_path / "b" / FINAL_NAME)

    def test_loss_decreases(self, samples, tmp_path):
        train(small_cfg(epochs=3, batch_size=4), samples, tmp_path)
        rows = parse_log(tmp_path / LOG_NAME)
        assert rows[-1]["loss"] < rows[0]["loss"]

    def test_max_steps(self, samples, tmp_path):
        result = train(small_cfg(epochs=10, max_steps=3), samples, tmp_path)
        assert result.steps == 3 and len(parse_log(tmp_path / LOG_NAME)) == 3

    def test_eval_reproduces_last_line(self, samples, tmp_path):
        cfg = small_cfg()
        train(cfg, samples, tmp_path)
        saved = load_config(tmp_path / CONFIG_NAME)
        assert saved == cfg
        model = HTMNet(saved.model)
        checkpoint.load_model(tmp_path / FINAL_NAME, model)
        loss, report = evaluate(model, stack_samples(samples), saved)
        last = parse_log(tmp_path / LOG_NAME)[-1]
        assert abs(loss - last["loss"]) <= 1e-6
        assert abs(report.rmse - last["rmse"]) <= 1e-6 and abs(report.delta_105 - last["d105"]) <= 1e-6

    def test_best_checkpoint_has_lowest_rmse(self, samples, tmp_path):
        cfg = small_cfg(epochs=3)
        train(cfg, samples, tmp_path)
        model = HTMNet(cfg.model)
        checkpoint.load_model(tmp_path / BEST_NAME, model)
        _, report = evaluate(model, stack_samples(samples), cfg)
        assert report.rmse == min(row["rmse"] for row in parse_log(tmp_path / LOG_NAME))

    def test_non_finite_loss_aborts(self, samples, tmp_path, monkeypatch):
        real = train_mod.evaluate
        calls = []

        def poisoned(*args, **kwargs):
            loss, report = real(*args, **kwargs)
            calls.append(1)
            return (float("nan") if len(calls) > 1 else loss), report
        monkeypatch.setattr(train_mod, "evaluate", poisoned)
        with pytest.raises(NonFiniteError, match="epoch 1"):
            train(small_cfg(), samples, tmp_path)

    def test_f64_precision(self, samples, tmp_path):
        cfg = small_cfg(epochs=1)
        cfg.precision = "f64"
        result = train(cfg, samples, tmp_path)
        assert result.model.decoder.head_out.weight.dtype == np.float64
        assert checkpoint.load(tmp_path / FINAL_NAME)["decoder.head_out.weight"].dtype == np.float64


class TestStack:
    def test_layout(self, samples):
        batch = stack_samples(samples)
        assert batch.rgb.shape == (4, 3, 32, 32) and batch.rgb.max() <= 1.0
        assert batch.mask.dtype == bool and batch.depth.shape == (4, 1, 32, 32)

    def test_empty(self):
        with pytest.raises(ValueError):
            stack_samples([])
