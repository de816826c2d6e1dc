"""Single-stage conditional distillation: joint consistency + guidance loss.

One trainer step draws (x, c, eps, t), forms z_t, lets the online model
predict, builds a less-noisy point z_s with the configured predictor, asks the
EMA target network for its noise prediction there, and descends

    L = d_eps(eps_target(z_s, s, c), eps_online(z_t, t, c)) + lambda * d_x(x, x_hat)

The target network is a stop-gradient EMA copy: its parameters enter the tape
as constants, so no gradient can reach them by construction.  z_s is fully
detached for the ddim_* predictors; for prev it stays differentiable through
the online x_hat only, with the forward noise reused in place of a model
noise estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .data import ConditionalBatch
from .model import (
    AdaptedModel,
    apply_freeze,
    build_param_vars,
    copy_model,
    forward_on_tape,
    forward_uncond,
    trainable_names,
)
from .parametrization import PREDICTOR_KINDS
from .schedule import NoiseSchedule

__all__ = [
    "DistillConfig",
    "TrainerState",
    "DistillError",
    "init_trainer",
    "sample_batch_time",
    "distill_loss",
    "distill_step",
    "ema_update",
    "guidance_distance",
    "train",
    "apply_update",
    "make_opt_state",
]

D_X_KINDS = ("l2_data", "smooth_l1", "none")
TIME_MODES = ("shared", "per_item")
FREEZE_MODES = ("full", "adapter_only")
OPTIMIZERS = ("sgd", "adam")


class DistillError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """Trainer knobs; times live on the grid {k/grid_n : k = 1..grid_n}.

    delta_t counts grid units; 0 is allowed only for degenerate equal-time
    diagnostics where z_s falls back to z_t.
    """

    steps: int = 400
    batch_size: int = 64
    learning_rate: float = 0.05
    delta_t: int = 1
    grid_n: int = 64
    ema_gamma: float = 0.95
    predictor: str = "prev"
    d_eps: str = "l2"
    d_x: str = "l2_data"
    guidance_weight: float = 1.0
    time_mode: str = "shared"
    freeze_mode: str = "full"
    optimizer: str = "sgd"
    target_time: str = "s"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise DistillError("steps and batch_size must be positive")
        if self.learning_rate < 0:
            raise DistillError("learning_rate must be nonnegative")
        if not (0 <= self.delta_t <= self.grid_n):
            raise DistillError(f"delta_t {self.delta_t} outside [0, grid_n={self.grid_n}]")
        if self.grid_n < 1:
            raise DistillError("grid_n must be positive")
        if not (0.0 <= self.ema_gamma <= 1.0):
            raise DistillError(f"ema_gamma {self.ema_gamma} outside [0, 1]")
        if self.predictor not in PREDICTOR_KINDS:
            raise DistillError(f"unknown predictor {self.predictor!r}; expected {PREDICTOR_KINDS}")
        if self.d_eps != "l2":
            raise DistillError(f"unknown d_eps {self.d_eps!r}; only 'l2' is defined")
        if self.d_x not in D_X_KINDS:
            raise DistillError(f"unknown d_x {self.d_x!r}; expected {D_X_KINDS}")
        if self.guidance_weight < 0:
            raise DistillError("guidance_weight must be nonnegative")
        if self.time_mode not in TIME_MODES:
            raise DistillError(f"unknown time_mode {self.time_mode!r}")
        if self.freeze_mode not in FREEZE_MODES:
            raise DistillError(f"unknown freeze_mode {self.freeze_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise DistillError(f"unknown optimizer {self.optimizer!r}")
        if self.target_time not in ("s", "t"):
            raise DistillError("target_time must be 's' or 't'")


@dataclass
class TrainerState:
    """Online model, its EMA target, and the frozen starting backbone."""

    online: AdaptedModel
    target: AdaptedModel
    pretrained: AdaptedModel
    sched: NoiseSchedule
    cfg: DistillConfig
    rng: np.random.Generator
    step_count: int = 0
    history: list = field(default_factory=list)
    opt_state: dict = field(default_factory=dict)


def init_trainer(model: AdaptedModel, sched: NoiseSchedule, cfg: DistillConfig) -> TrainerState:
    """Freeze per config, snapshot the starting model as target and reference."""
    online = apply_freeze(copy_model(model), cfg.freeze_mode)
    state = TrainerState(
        online=online,
        target=copy_model(online),
        pretrained=copy_model(online),
        sched=sched,
        cfg=cfg,
        rng=np.random.default_rng(cfg.seed),
    )
    state.opt_state = make_opt_state(online.params, trainable_names(online), cfg)
    return state


def sample_batch_time(cfg: DistillConfig, batch_size: int, rng) -> np.ndarray:
    """Draw batch times from the uniform grid, never below one delta_t.

    shared: one grid point for the whole batch; per_item: i.i.d. per row.
    """
    if batch_size < 1:
        raise DistillError("batch_size must be positive")
    k_min = max(1, cfg.delta_t)
    if cfg.time_mode == "shared":
        k = int(rng.integers(k_min, cfg.grid_n + 1))
        ks = np.full(batch_size, k)
    else:
        ks = rng.integers(k_min, cfg.grid_n + 1, size=batch_size)
    return ks / cfg.grid_n


def guidance_distance(kind: str, x: np.ndarray, x_hat: np.ndarray) -> float:
    """Data-space distance for the guidance term, averaged over all entries."""
    if x.shape != x_hat.shape:
        raise DistillError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if kind == "l2_data":
        return float(np.mean((x - x_hat) ** 2))
    if kind == "smooth_l1":
        return float(np.mean(_huber_np(x_hat - x)))
    if kind == "none":
        return 0.0
    raise DistillError(f"unknown guidance distance {kind!r}")


def _huber_np(a, delta=1.0):
    absa = np.abs(a)
    return np.where(absa <= delta, 0.5 * a * a, delta * (absa - 0.5 * delta))


def distill_loss(state: TrainerState, batch: ConditionalBatch, cfg: DistillConfig):
    """Total loss and its exact decomposition {consistency, guidance}."""
    _, loss_var, parts = _loss_tape(state, batch, cfg)
    return float(loss_var.value), parts


def _loss_tape(state: TrainerState, batch: ConditionalBatch, cfg: DistillConfig):
    if batch.t is None:
        raise DistillError("batch times not set; call sample_batch_time first")
    t = np.asarray(batch.t, dtype=np.float64)
    if t.shape != (batch.x.shape[0],):
        raise DistillError(f"batch times shape {t.shape} != ({batch.x.shape[0]},)")
    if cfg.time_mode == "shared" and not np.all(t == t[0]):
        raise DistillError("shared time_mode requires one t per batch")
    s = t - cfg.delta_t / cfg.grid_n
    if np.any(s < 0):
        raise DistillError(f"target time below zero: min s = {s.min()}")

    sched, arch = state.sched, state.online.arch
    a_t = np.array([sched.alpha(float(ti)) for ti in t])[:, None]
    s_t = np.array([sched.sigma(float(ti)) for ti in t])[:, None]
    a_s = np.array([sched.alpha(float(si)) for si in s])[:, None]
    s_s = np.array([sched.sigma(float(si)) for si in s])[:, None]
    z_t = a_t * batch.x + s_t * batch.eps

    tape = Tape()
    online_vars = build_param_vars(tape, state.online, set(trainable_names(state.online)))
    v_t = forward_on_tape(tape, arch, online_vars, z_t, t, batch.c)
    # x_hat = a_t z_t - s_t v, eps_hat = a_t v + s_t z_t
    x_hat = tape.sub(tape.const(a_t * z_t), tape.mul(tape.const(s_t), v_t))
    eps_t = tape.add(tape.mul(tape.const(a_t), v_t), tape.const(s_t * z_t))

    if cfg.predictor == "prev":
        # z_s = a_s x_hat + s_s eps_true; the only differentiable route into z_s
        z_s = tape.add(tape.mul(tape.const(a_s), x_hat), tape.const(s_s * batch.eps))
    elif cfg.predictor == "ddim_v":
        v_det = v_t.value
        x_det = a_t * z_t - s_t * v_det
        e_det = a_t * v_det + s_t * z_t
        z_s = tape.const(a_s * x_det + s_s * e_det)
    elif cfg.predictor == "ddim_eps":
        # one solver step of the frozen starting model; no online dependence
        v_pre = forward_uncond(state.pretrained, z_t, t)
        x_pre = a_t * z_t - s_t * v_pre
        e_pre = a_t * v_pre + s_t * z_t
        z_s = tape.const(a_s * x_pre + s_s * e_pre)
    else:
        raise DistillError(f"unknown predictor {cfg.predictor!r}")

    target_vars = build_param_vars(tape, state.target)
    tau = s if cfg.target_time == "s" else t
    v_s = forward_on_tape(tape, arch, target_vars, z_s, tau, batch.c)
    eps_s = tape.add(tape.mul(tape.const(a_s), v_s), tape.mul(tape.const(s_s), z_s))

    consistency = tape.mse(eps_s, eps_t)
    if cfg.d_x == "l2_data":
        guidance = tape.mse(tape.const(batch.x), x_hat)
    elif cfg.d_x == "smooth_l1":
        guidance = tape.mean(tape.huber(tape.sub(x_hat, tape.const(batch.x)), delta=1.0))
    else:
        guidance = tape.const(0.0)
    total = tape.add(consistency, tape.scale(guidance, cfg.guidance_weight))
    parts = {"consistency": float(consistency.value), "guidance": float(guidance.value)}
    return tape, total, parts


def distill_step(state: TrainerState, batch: ConditionalBatch, cfg: DistillConfig | None = None):
    """One gradient step on the online model followed by the EMA target update."""
    cfg = state.cfg if cfg is None else cfg
    if batch.t is None:
        batch.t = sample_batch_time(cfg, batch.x.shape[0], state.rng)
    tape, loss_var, parts = _loss_tape(state, batch, cfg)
    loss = float(loss_var.value)
    if not math.isfinite(loss):
        raise DistillError(
            f"non-finite loss at step {state.step_count}: total={loss}, "
            f"consistency={parts['consistency']}, guidance={parts['guidance']}"
        )
    names = trainable_names(state.online)
    grads = tape.backward(loss_var, names)
    _apply_update(state, names, grads, cfg)
    ema_update(state.target.params, state.online.params, cfg.ema_gamma)
    for name in state.online.freeze_mask:
        # EMA of two equal frozen tensors must stay byte-equal, not 1-ulp close
        state.target.params[name] = state.online.params[name].copy()
    state.step_count += 1
    return state, loss, parts


def _apply_update(state: TrainerState, names, grads, cfg: DistillConfig):
    apply_update(state.online.params, names, grads, cfg, state.opt_state)


def apply_update(params: dict, names, grads, cfg: DistillConfig, opt_state: dict):
    """One sgd or bias-corrected adam step on params, in place."""
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for n in names:
            params[n] = params[n] - lr * grads[n]
        return
    opt_state["count"] += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bias1 = 1.0 - b1 ** opt_state["count"]
    bias2 = 1.0 - b2 ** opt_state["count"]
    for n in names:
        opt_state["m"][n] = b1 * opt_state["m"][n] + (1.0 - b1) * grads[n]
        opt_state["v"][n] = b2 * opt_state["v"][n] + (1.0 - b2) * grads[n] ** 2
        m_hat = opt_state["m"][n] / bias1
        v_hat = opt_state["v"][n] / bias2
        params[n] = params[n] - lr * m_hat / (np.sqrt(v_hat) + eps)


def make_opt_state(params: dict, names, cfg: DistillConfig) -> dict:
    if cfg.optimizer != "adam":
        return {}
    return {
        "m": {n: np.zeros_like(params[n]) for n in names},
        "v": {n: np.zeros_like(params[n]) for n in names},
        "count": 0,
    }


def ema_update(target_params: dict, online_params: dict, gamma: float) -> dict:
    """target <- gamma * target + (1 - gamma) * online, elementwise in place.

    The endpoints are exact: gamma=1 leaves target bit-identical, gamma=0
    copies online bit-identically.
    """
    if set(target_params) != set(online_params):
        raise DistillError(
            f"parameter name mismatch: {sorted(set(target_params) ^ set(online_params))}"
        )
    for name in target_params:
        if target_params[name].shape != online_params[name].shape:
            raise DistillError(f"shape mismatch for {name!r}")
    if gamma == 1.0:
        return target_params
    if gamma == 0.0:
        for name in target_params:
            target_params[name] = online_params[name].copy()
        return target_params
    for name in target_params:
        target_params[name] = gamma * target_params[name] + (1.0 - gamma) * online_params[name]
    return target_params


def train(
    state: TrainerState,
    batches,
    metrics_every: int = 50,
    eval_fn=None,
) -> TrainerState:
    """Run cfg.steps trainer steps, appending metric rows to state.history.

    eval_fn(state) -> dict of extra finite metrics, invoked on recorded rows.
    """
    cfg = state.cfg
    for _ in range(cfg.steps):
        batch = next(batches)
        state, loss, parts = distill_step(state, batch, cfg)
        last = state.step_count == cfg.steps
        if last or (metrics_every > 0 and state.step_count % metrics_every == 0):
            row = {
                "step": state.step_count,
                "loss": loss,
                "consistency": parts["consistency"],
                "guidance": parts["guidance"],
            }
            if eval_fn is not None:
                row.update(eval_fn(state))
            state.history.append(row)
    return state
