"""Velocity-regression pretraining and the conditional-finetune teacher.

The regression target at time t is v* = alpha(t) eps - sigma(t) x, the exact
velocity of the forward mix z = alpha x + sigma eps.  Mode "uncond" trains the
backbone alone with the condition branch disabled; "cond_finetune" continues
from a pretrained model with conditioning active, which serves as the
many-step teacher that distillation is measured against.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .data import ConditionalBatch
from .distill import DistillConfig, DistillError, apply_update, make_opt_state
from .model import AdaptedModel, build_param_vars, forward_on_tape, trainable_names

__all__ = [
    "PRETRAIN_MODES",
    "velocity_target",
    "pretrain_loss",
    "pretrain_step",
    "train_pretrain",
]

PRETRAIN_MODES = ("uncond", "cond_finetune")


def velocity_target(x: np.ndarray, eps: np.ndarray, alpha, sigma) -> np.ndarray:
    """v* = alpha eps - sigma x; recovers x exactly via x = alpha z - sigma v*."""
    return np.asarray(alpha) * eps - np.asarray(sigma) * x


def _trainable_for_mode(model: AdaptedModel, mode: str) -> list[str]:
    if mode not in PRETRAIN_MODES:
        raise DistillError(f"unknown pretrain mode {mode!r}; expected {PRETRAIN_MODES}")
    names = trainable_names(model)
    if mode == "uncond":
        names = [n for n in names if n.startswith("backbone.")]
    return names


def pretrain_loss(model: AdaptedModel, sched, batch: ConditionalBatch, t: np.ndarray,
                  mode: str = "uncond"):
    """Tape for MSE(v_hat(z_t, t[, c]), v*); returns (tape, loss_var, trainable)."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (batch.x.shape[0],):
        raise DistillError(f"t must hold one time per row, got shape {t.shape}")
    pairs = [sched.alpha_sigma(float(ti)) for ti in t]
    a = np.array([p[0] for p in pairs])[:, None]
    s = np.array([p[1] for p in pairs])[:, None]
    z = a * batch.x + s * batch.eps
    target = velocity_target(batch.x, batch.eps, a, s)
    trainable = _trainable_for_mode(model, mode)
    tape = Tape()
    pvars = build_param_vars(tape, model, trainable=trainable)
    c = batch.c if mode == "cond_finetune" else None
    v = forward_on_tape(tape, model.arch, pvars, z, t, c)
    loss = tape.mse(v, tape.const(target))
    tape.output("loss", loss)
    return tape, loss, trainable


def pretrain_step(model: AdaptedModel, sched, batch: ConditionalBatch,
                  cfg: DistillConfig, opt_state: dict, rng: np.random.Generator,
                  mode: str = "uncond") -> float:
    """One regression step on a fresh per-item time draw; mutates model.params."""
    t = rng.uniform(0.0, 1.0, size=batch.x.shape[0])
    tape, loss_var, trainable = pretrain_loss(model, sched, batch, t, mode)
    loss = float(loss_var.value)  # the tape is built eagerly at current params
    if not np.isfinite(loss):
        raise DistillError(f"non-finite pretrain loss: {loss}")
    grads = tape.backward(loss_var, trainable)
    apply_update(model.params, trainable, grads, cfg, opt_state)
    return loss


def train_pretrain(model: AdaptedModel, sched, batches, cfg: DistillConfig,
                   mode: str = "uncond", metrics_every: int = 50) -> list[dict]:
    """Run cfg.steps regression steps; returns sparse {step, loss} history rows."""
    trainable = _trainable_for_mode(model, mode)
    opt_state = make_opt_state(model.params, trainable, cfg)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    for step in range(cfg.steps):
        loss = pretrain_step(model, sched, next(batches), cfg, opt_state, rng, mode)
        if step % metrics_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss})
    return history
