"""MLP velocity model and its conditional adaptation.

The backbone predicts velocity from (z_t, time embedding).  Conditioning
duplicates the first (encoder) hidden layers into a parallel branch fed by an
embedded condition, and blends the two feature streams at every encoder level
through a learnable scalar gate initialized at zero, so the adapted model
starts out exactly equal to the unconditional one.  A freeze mask supports
adapter-only training with the backbone untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Var

__all__ = [
    "Arch",
    "AdaptedModel",
    "init_adapted",
    "apply_freeze",
    "copy_model",
    "time_embedding",
    "forward_uncond",
    "forward_cond",
    "forward_on_tape",
    "build_param_vars",
    "param_count",
    "trainable_names",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    """Layer widths and embedding sizes for the adapted MLP."""

    data_dim: int
    cond_dim: int
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    n_encoder: int = 2
    time_freqs: int = 8
    per_layer_gate: bool = False

    def __post_init__(self):
        if not (1 <= self.n_encoder <= len(self.hidden)):
            raise ModelError("n_encoder must be in [1, len(hidden)]")

    @property
    def input_dim(self) -> int:
        return self.data_dim + 2 * self.time_freqs

    def gate_names(self) -> list[str]:
        if self.per_layer_gate:
            return [f"gate.mu{i}" for i in range(self.n_encoder)]
        return ["gate.mu"]


@dataclass
class AdaptedModel:
    """Backbone + conditional encoder + gate, with a freeze mask."""

    arch: Arch
    params: dict[str, np.ndarray]
    freeze_mask: frozenset[str] = field(default_factory=frozenset)

    @property
    def gate_mu(self) -> float:
        return float(self.params["gate.mu" if not self.arch.per_layer_gate else "gate.mu0"])

    def backbone_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("backbone.")}

    def cond_encoder_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("cond.")}


def backbone_param_shapes(arch: Arch) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    prev = arch.input_dim
    for i, width in enumerate(arch.hidden):
        shapes[f"backbone.layer{i}.weight"] = (prev, width)
        shapes[f"backbone.layer{i}.bias"] = (width,)
        prev = width
    shapes["backbone.out.weight"] = (prev, arch.data_dim)
    shapes["backbone.out.bias"] = (arch.data_dim,)
    return shapes


def adapted_param_shapes(arch: Arch) -> dict[str, tuple[int, ...]]:
    """Expected name -> shape map for a full adapted model."""
    shapes = backbone_param_shapes(arch)
    shapes["cond.embed.weight"] = (arch.cond_dim, arch.data_dim)
    shapes["cond.embed.bias"] = (arch.data_dim,)
    for i in range(arch.n_encoder):
        shapes[f"cond.layer{i}.weight"] = shapes[f"backbone.layer{i}.weight"]
        shapes[f"cond.layer{i}.bias"] = shapes[f"backbone.layer{i}.bias"]
    for name in arch.gate_names():
        shapes[name] = ()
    return shapes


def init_adapted(
    arch: Arch,
    seed: int,
    backbone_params: dict[str, np.ndarray] | None = None,
) -> AdaptedModel:
    """Build an adapted model from a pretrained backbone or from scratch.

    The conditional branch always copies the backbone's encoder layers; its
    condition-embedding layer is freshly initialized; every gate starts at 0.
    """
    rng = np.random.default_rng(seed)
    shapes = backbone_param_shapes(arch)
    if backbone_params is None:
        params = {name: _init_tensor(rng, shape) for name, shape in shapes.items()}
    else:
        mismatched = []
        for name, shape in shapes.items():
            got = backbone_params.get(name)
            if got is None:
                mismatched.append(f"{name}: missing")
            elif got.shape != shape:
                mismatched.append(f"{name}: shape {got.shape} != expected {shape}")
        extra = set(backbone_params) - set(shapes)
        mismatched.extend(f"{name}: unexpected" for name in sorted(extra))
        if mismatched:
            raise ModelError("incompatible backbone checkpoint: " + "; ".join(mismatched))
        params = {name: np.array(backbone_params[name], dtype=np.float64) for name in shapes}
    params["cond.embed.weight"] = _init_tensor(rng, (arch.cond_dim, arch.data_dim))
    params["cond.embed.bias"] = np.zeros(arch.data_dim)
    for i in range(arch.n_encoder):
        params[f"cond.layer{i}.weight"] = params[f"backbone.layer{i}.weight"].copy()
        params[f"cond.layer{i}.bias"] = params[f"backbone.layer{i}.bias"].copy()
    for name in arch.gate_names():
        params[name] = np.zeros(())
    return AdaptedModel(arch=arch, params=params)


def _init_tensor(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in = shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def apply_freeze(model: AdaptedModel, mode: str) -> AdaptedModel:
    """full: nothing frozen; adapter_only: backbone frozen, adapter + gate train."""
    if mode == "full":
        return replace(model, freeze_mask=frozenset())
    if mode == "adapter_only":
        frozen = frozenset(n for n in model.params if n.startswith("backbone."))
        return replace(model, freeze_mask=frozen)
    raise ModelError(f"unknown freeze mode {mode!r}")


def copy_model(model: AdaptedModel) -> AdaptedModel:
    return AdaptedModel(
        arch=model.arch,
        params={k: v.copy() for k, v in model.params.items()},
        freeze_mask=model.freeze_mask,
    )


def trainable_names(model: AdaptedModel) -> list[str]:
    return [n for n in sorted(model.params) if n not in model.freeze_mask]


def param_count(params: dict[str, np.ndarray], names=None) -> int:
    names = params.keys() if names is None else names
    return sum(params[n].size for n in names)


def time_embedding(t, freqs: int) -> np.ndarray:
    """Sinusoidal embedding [sin(pi 2^k t), cos(pi 2^k t)] for k < freqs.

    Accepts a scalar t or a length-B vector; returns [2*freqs] or [B, 2*freqs].
    """
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * (math.pi * (2.0 ** np.arange(freqs)))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def build_param_vars(
    tape: Tape, model: AdaptedModel, trainable: set[str] | None = None
) -> dict[str, Var]:
    """Enter parameters on a tape: named inputs if trainable, constants otherwise.

    Frozen and target-network parameters enter as constants, so no gradient is
    ever computed for them.
    """
    if trainable is None:
        trainable = set()
    pvars = {}
    for name in sorted(model.params):
        value = model.params[name]
        pvars[name] = tape.input(name, value) if name in trainable else tape.const(value)
    return pvars


def forward_on_tape(
    tape: Tape,
    arch: Arch,
    pvars: dict[str, Var],
    z,
    t,
    c: np.ndarray | None = None,
) -> Var:
    """Record the velocity prediction for a batch; conditional iff c is given.

    z may be a plain array or a Var already on the tape, in which case
    gradients flow through it into whatever produced it.
    """
    if isinstance(z, Var):
        z_var = z
        if len(z_var.shape) != 2 or z_var.shape[1] != arch.data_dim:
            raise ModelError(f"z must have {arch.data_dim} columns, got shape {z_var.shape}")
    else:
        z_var = tape.const(_batched(z, arch.data_dim, "z"))
    rows = z_var.shape[0]
    temb = np.ascontiguousarray(
        np.broadcast_to(
            np.atleast_2d(time_embedding(t, arch.time_freqs)), (rows, 2 * arch.time_freqs)
        )
    )
    h = tape.concat([z_var, tape.const(temb)], axis=1)
    if c is not None:
        c = _batched(c, arch.cond_dim, "c")
        if c.shape[0] != rows:
            raise ModelError(f"batch mismatch: z rows {rows} != c rows {c.shape[0]}")
        cemb = tape.affine(tape.const(c), pvars["cond.embed.weight"], pvars["cond.embed.bias"])
        p = tape.concat([cemb, tape.const(np.ascontiguousarray(temb))], axis=1)
    gates = arch.gate_names()
    for i in range(len(arch.hidden)):
        hb = tape.tanh(
            tape.affine(h, pvars[f"backbone.layer{i}.weight"], pvars[f"backbone.layer{i}.bias"])
        )
        if c is not None and i < arch.n_encoder:
            p = tape.tanh(
                tape.affine(p, pvars[f"cond.layer{i}.weight"], pvars[f"cond.layer{i}.bias"])
            )
            gate = pvars[gates[i] if arch.per_layer_gate else gates[0]]
            h = tape.blend(hb, p, gate)
        else:
            h = hb
    return tape.affine(h, pvars["backbone.out.weight"], pvars["backbone.out.bias"])


def forward_uncond(model: AdaptedModel, z: np.ndarray, t) -> np.ndarray:
    """Unconditional velocity prediction (no gradients recorded for reuse)."""
    return _forward_value(model, z, t, None)


def forward_cond(model: AdaptedModel, z: np.ndarray, c: np.ndarray, t) -> np.ndarray:
    """Conditional velocity prediction through the gated encoder blend."""
    if c is None:
        raise ModelError("forward_cond requires a condition")
    return _forward_value(model, z, t, c)


def _forward_value(model: AdaptedModel, z, t, c) -> np.ndarray:
    single = np.asarray(z).ndim == 1
    tape = Tape()
    pvars = build_param_vars(tape, model)
    out = forward_on_tape(tape, model.arch, pvars, z, t, c).value
    return out[0] if single else out


def _batched(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ModelError(f"{name} must have {dim} columns, got shape {x.shape}")
    return np.ascontiguousarray(x)
