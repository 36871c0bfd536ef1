"""Optimizer math, schedule shape, training-loop contracts, resume exactness."""

import csv
import math
import os

import numpy as np
import pytest

from triseg import tensor as T
from triseg.metrics import bce_loss
from triseg.module import Linear
from triseg.network import desk_config, SegNetwork, load_checkpoint
from triseg.tensor import Tensor, no_grad
from triseg.textbridge import synth_embeddings
from triseg.trainer import (
    LOG_COLUMNS,
    AdamW,
    NumericFailure,
    OptimConfig,
    lr_schedule,
    train,
)
from triseg.volume import PreprocessConfig, synth_generate


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW([("p", p)], OptimConfig(lr=0.1, weight_decay=0.0, steps=10, warmup_steps=1))
        p.grad = np.zeros(2)
        opt.step(0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_minus_lr_for_unit_gradient(self):
        # bias-corrected m-hat / sqrt(v-hat) equals 1 after one unit-gradient step
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = AdamW([("p", p)], OptimConfig(lr=0.01, weight_decay=0.0, steps=10, warmup_steps=1))
        p.grad = np.array([1.0])
        opt.step(0.01)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_pure_decoupled_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        cfg = OptimConfig(lr=0.1, weight_decay=0.5, steps=10, warmup_steps=1)
        opt = AdamW([("p", p)], cfg)
        for _ in range(3):
            p.grad = np.array([0.0])
            opt.step(0.1)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5) ** 3)

    def test_nan_gradient_aborts_with_diagnostic(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = AdamW([("p", p)], OptimConfig(steps=10, warmup_steps=1))
        p.grad = np.array([np.nan])
        with pytest.raises(NumericFailure, match="p"):
            opt.step(1e-4)


class TestSchedule:
    CFG = OptimConfig(lr=1.0, steps=1000, warmup_steps=50)

    def test_first_step_of_warmup(self):
        assert lr_schedule(0, self.CFG) == pytest.approx(1.0 / 50)

    def test_warmup_seam_continuity(self):
        assert lr_schedule(self.CFG.warmup_steps, self.CFG) == self.CFG.lr
        assert lr_schedule(self.CFG.warmup_steps - 1, self.CFG) == self.CFG.lr

    def test_cosine_midpoint_and_end(self):
        mid = self.CFG.warmup_steps + (self.CFG.steps - self.CFG.warmup_steps) // 2
        assert lr_schedule(mid, self.CFG) == pytest.approx(0.5)
        assert lr_schedule(self.CFG.steps, self.CFG) == pytest.approx(0.0, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(lr=-1.0)
        with pytest.raises(ValueError):
            OptimConfig(steps=10, warmup_steps=10)


def _tiny_setup(tmp_path, steps=4, seed=0, size=(16, 16, 16)):
    cfg = desk_config(num_classes=2)
    from dataclasses import replace

    cfg = replace(cfg, input_size=size)
    model = SegNetwork(cfg, seed=seed)
    cases, names = synth_generate(seed, 2, 2, size=size)
    emb = synth_embeddings(names, seed)
    e1, e2 = emb.matrix(names, 1), emb.matrix(names, 2)
    pp = PreprocessConfig(crop_size=size, augment=False)
    ocfg = OptimConfig(lr=1e-3, steps=steps, warmup_steps=1)
    return model, cases, e1, e2, pp, ocfg


class TestTrainLoop:
    def test_zero_lr_leaves_parameters_untouched(self, tmp_path):
        model, cases, e1, e2, pp, _ = _tiny_setup(tmp_path)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        ocfg = OptimConfig(lr=0.0, steps=2, warmup_steps=1)
        train(cases, model, e1, e2, ocfg, pp, tmp_path, seed=0, ckpt_every=0)
        for n, p in model.named_parameters():
            assert np.array_equal(before[n], p.data), n

    def test_loss_log_columns_and_rows(self, tmp_path):
        model, cases, e1, e2, pp, ocfg = _tiny_setup(tmp_path, steps=3)
        train(cases, model, e1, e2, ocfg, pp, tmp_path, seed=0, ckpt_every=0)
        with open(os.path.join(tmp_path, "loss_log.csv")) as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert len(rows) == 4

    def test_identical_seeds_identical_logs(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        for d in (a_dir, b_dir):
            model, cases, e1, e2, pp, ocfg = _tiny_setup(tmp_path, steps=3, seed=5)
            train(cases, model, e1, e2, ocfg, pp, d, seed=5, ckpt_every=0)
        assert (a_dir / "loss_log.csv").read_bytes() == (b_dir / "loss_log.csv").read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        # one 6-step run checkpointing at step 3, then a fresh model resumed
        # from that mid-run state must replay steps 3..5 with identical losses
        full_dir, resume_dir = tmp_path / "full", tmp_path / "resume"
        model, cases, e1, e2, pp, _ = _tiny_setup(tmp_path, seed=3)
        ocfg = OptimConfig(lr=1e-3, steps=6, warmup_steps=1)
        train(cases, model, e1, e2, ocfg, pp, full_dir, seed=3, ckpt_every=3)

        model2, cases2, e1b, e2b, pp2, _ = _tiny_setup(tmp_path, seed=3)
        mid = full_dir / "model_step000003.ckpt"
        train(cases2, model2, e1b, e2b, ocfg, pp2, resume_dir, seed=3, ckpt_every=0, resume_from=mid)

        with open(full_dir / "loss_log.csv") as f:
            full_rows = list(csv.reader(f))
        with open(resume_dir / "loss_log.csv") as f:
            resumed = list(csv.reader(f))
        assert resumed[0] == list(LOG_COLUMNS)
        assert resumed[1:] == full_rows[4:]  # steps 3..5 match bit for bit

    def test_checkpoint_restores_forward_bit_identical(self, tmp_path):
        model, cases, e1, e2, pp, ocfg = _tiny_setup(tmp_path, steps=2)
        ckpt, _ = train(cases, model, e1, e2, ocfg, pp, tmp_path, seed=0, ckpt_every=0)
        restored, extra, leftovers = load_checkpoint(ckpt)
        assert extra["step"] == 2
        assert any(k.startswith("optim.m.") for k in leftovers)
        x = Tensor(np.random.default_rng(0).random((1, 1, 16, 16, 16)))
        with no_grad():
            a = model(x, e1, e2).logits.data
            b = restored(x, e1, e2).logits.data
        assert np.array_equal(a, b)


class TestConvexSanity:
    def test_loss_trend_nonincreasing_on_separable_problem(self, rng):
        # single linear layer + sigmoid cross-entropy on a separable cloud
        n = 64
        feats = np.vstack([rng.normal(-2.0, 0.5, (n // 2, 4)), rng.normal(2.0, 0.5, (n // 2, 4))])
        labels = np.concatenate([np.zeros((n // 2, 1)), np.ones((n // 2, 1))])
        layer = Linear(4, 1, rng)
        opt = AdamW(
            [(f"w{i}", p) for i, p in enumerate(layer.parameters())],
            OptimConfig(lr=5e-2, weight_decay=0.0, steps=40, warmup_steps=1),
        )
        losses = []
        for step in range(40):
            out = layer(Tensor(feats))
            loss = bce_loss(out, labels)
            layer.zero_grad()
            loss.backward()
            opt.step(5e-2)
            losses.append(loss.item())
        window = 5
        means = [np.mean(losses[i : i + window]) for i in range(0, len(losses) - window + 1, window)]
        assert all(b < a for a, b in zip(means, means[1:]))
        assert losses[-1] < 0.5 * losses[0]
