"""Optimization loop: decoupled-weight-decay Adam, linear warmup plus cosine
annealing, CSV loss logging, resumable checkpoints, and the synthetic overfit
experiment driver.

Determinism contract: the per-step data transform RNG is derived from
(seed, step), so a run resumed from any checkpoint reproduces the exact losses
of the uninterrupted run, and two runs with identical flags produce identical
loss logs in f64.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import LossWeights, dice_metric, total_loss
from .network import SegNetwork, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .volume import PreprocessConfig, preprocess, presence_row


class NumericFailure(RuntimeError):
    """Raised when a loss or gradient goes non-finite; maps to CLI exit 3."""


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 1
    steps: int = 2000
    warmup_steps: int = 50
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.warmup_steps < max(self.steps, 1):
            raise ValueError("need 0 <= warmup < steps")


def lr_schedule(step, config: OptimConfig) -> float:
    """Linear ramp over the warmup, then cosine to zero; continuous at the seam."""
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    t = min(1.0, (step - config.warmup_steps) / span)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Bias-corrected Adam with weight decay applied apart from the moments."""

    def __init__(self, named_params, config: OptimConfig):
        self.named_params = list(named_params)
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr):
        cfg = self.config
        if cfg.grad_clip is not None:
            sq = sum(float((p.grad**2).sum()) for _, p in self.named_params if p.grad is not None)
            scale = min(1.0, cfg.grad_clip / (math.sqrt(sq) + 1e-12))
        else:
            scale = 1.0
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient in {name} at optimizer step {self.t}")
            g = g * scale
            if cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def state_tensors(self):
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors, t):
        self.t = t
        for name in self.m:
            self.m[name] = tensors[f"optim.m.{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape).copy()
            self.v[name] = tensors[f"optim.v.{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape).copy()


LOG_COLUMNS = ("step", "l_bce", "l_dice", "l_contrast", "l_total", "lr")


def _batch_from_case(case, pp_config, seed, step, dtype):
    """Deterministically preprocess one case for one step."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    crop_mode = "random" if pp_config.augment else "center"
    v, l = preprocess(case.volume, case.label, pp_config, rng, crop_mode)
    x = v.data.data[None].astype(dtype)
    target = l.data.data[None].astype(np.float64)
    y = presence_row(l)[None]
    return x, target, y


def train(
    cases,
    model: SegNetwork,
    label_embeds: np.ndarray,
    desc_embeds: np.ndarray,
    optim_config: OptimConfig,
    pp_config: PreprocessConfig,
    out_dir,
    seed=0,
    weights: LossWeights = LossWeights(),
    ckpt_every=100,
    resume_from=None,
    log_name="loss_log.csv",
):
    """Run the optimization loop; returns (checkpoint path, history rows)."""
    os.makedirs(out_dir, exist_ok=True)
    opt = AdamW(list(model.named_parameters()), optim_config)
    start_step = 0
    if resume_from:
        _, extra, leftovers = _restore(model, resume_from)
        opt.load_state(leftovers, extra["optim_t"])
        start_step = extra["step"]

    dtype = model.parameters()[0].dtype.type
    history = []
    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    append = start_step > 0 and os.path.exists(log_path)
    with open(log_path, "a" if append else "w", newline="") as logf:
        writer = csv.writer(logf)
        if not append:
            writer.writerow(LOG_COLUMNS)
        for step in range(start_step, optim_config.steps):
            case = cases[step % len(cases)]
            x, target, y = _batch_from_case(case, pp_config, seed, step, dtype)
            out = model(Tensor(x), label_embeds, desc_embeds)
            loss, parts = total_loss(out.logits, target, out.presence_similarity, y, weights)
            if not np.isfinite(loss.item()):
                save_checkpoint(
                    os.path.join(out_dir, "halt_diagnostic.ckpt"), model,
                    extra={"step": step, "optim_t": opt.t, "seed": seed},
                    extra_tensors=opt.state_tensors(),
                )
                raise NumericFailure(f"non-finite loss at step {step}; last good state saved")
            model.zero_grad()
            loss.backward()
            lr = lr_schedule(step, optim_config)
            opt.step(lr)
            row = (step, parts["bce"], parts["dice"], parts["contrast"], loss.item(), lr)
            history.append(row)
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
            if ckpt_every and (step + 1) % ckpt_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"model_step{step + 1:06d}.ckpt"), model,
                    extra={"step": step + 1, "optim_t": opt.t, "seed": seed},
                    extra_tensors=opt.state_tensors(),
                )
    save_checkpoint(
        ckpt_path, model,
        extra={"step": optim_config.steps, "optim_t": opt.t, "seed": seed},
        extra_tensors=opt.state_tensors(),
    )
    return ckpt_path, history


def _restore(model, path):
    fresh, extra, leftovers = load_checkpoint(path)
    if fresh.config != model.config:
        raise ValueError("checkpoint config does not match the model")
    for (_, p), (_, q) in zip(model.named_parameters(), fresh.named_parameters()):
        p.data = q.data.copy()
    return model, extra, leftovers


def evaluate_dice(model: SegNetwork, cases, label_embeds, desc_embeds, pp_config) -> float:
    """Mean Dice over cases and classes with thresholded predictions."""
    dtype = model.parameters()[0].dtype.type
    scores = []
    with T.no_grad():
        for case in cases:
            v, l = preprocess(case.volume, case.label, pp_config, None, "center")
            out = model(Tensor(v.data.data[None].astype(dtype)), label_embeds, desc_embeds)
            for k in range(l.num_classes):
                scores.append(dice_metric(out.masks[0, k], l.data.data[k]))
    return float(np.mean(scores))


# -- the desk-scale overfit experiment ------------------------------------------------


def overfit_experiment(out_dir, seed=0, steps=300, n_volumes=2, num_classes=3, lr=3e-3):
    """Train the desk preset to memorize a tiny synthetic set; returns results.

    Target: mean train Dice >= 0.90 within `steps` optimizer steps.
    """
    from .network import desk_config
    from .textbridge import synth_embeddings
    from .volume import synth_generate

    cfg = desk_config(num_classes=num_classes)
    model = SegNetwork(cfg, seed=seed)
    cases, names = synth_generate(seed, n_volumes, num_classes, size=cfg.input_size)
    emb = synth_embeddings(names, seed)
    e_label = emb.matrix(names, branch=1)
    e_desc = emb.matrix(names, branch=2)
    pp = PreprocessConfig(crop_size=cfg.input_size, augment=False)
    ocfg = OptimConfig(lr=lr, steps=steps, warmup_steps=max(1, round(steps * 50 / 2000)))
    ckpt, history = train(cases, model, e_label, e_desc, ocfg, pp, out_dir, seed=seed)
    dice = evaluate_dice(model, cases, e_label, e_desc, pp)
    return {"checkpoint": ckpt, "history": history, "train_dice": dice, "class_names": names}
