"""Flat key=value run configuration with strict parsing and a canonical echo."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .data import DATASET_KINDS
from .distill import DistillConfig, DistillError
from .eval import ALLOWED_KS
from .model import Arch, ModelError
from .parametrization import PREDICTOR_KINDS
from .schedule import SCHEDULE_KINDS

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "parse_config_text",
    "config_to_text",
    "config_hash",
    "arch_from",
    "distill_from",
    "apply_overrides",
    "validate_for_command",
]

INIT_MODES = ("random", "pretrained")
PRETRAIN_MODES = ("uncond", "cond_finetune")
COMMANDS = ("pretrain", "distill", "sample", "eval", "verify")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every knob a run can read, with documented defaults."""

    # noise schedule
    schedule: str = "cosine"
    # architecture
    data_dim: int = 2
    cond_dim: int = 4
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    n_encoder: int = 2
    time_freqs: int = 8
    per_layer_gate: bool = False
    # trainer
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
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # dataset
    dataset: str = "cond_mixture"
    n_samples: int = 4096
    data_seed: int = 0
    n_components: int = 4
    radius: float = 2.0
    noise: float = 0.25
    length: int = 16
    pool: int = 4
    obs_noise: float = 0.05
    csv_path: str = ""
    # initialization and artifacts
    init: str = "random"
    init_checkpoint: str = ""
    pretrain_mode: str = "uncond"
    checkpoint: str = ""
    # sampling / evaluation
    sample_k: int = 4
    sample_n: int = 256
    eval_ks: tuple[int, ...] = (1, 2, 4, 8)
    eval_seeds: int = 5
    eval_n: int = 512
    metrics_every: int = 50
    # run plumbing
    out_dir: str = ""
    seed: int = 0


@dataclass(frozen=True)
class _Spec:
    kind: str  # "int" | "float" | "bool" | "str" | "ints"
    choices: tuple = ()
    low: float | None = None
    high: float | None = None


_SCHEMA: dict[str, _Spec] = {
    "schedule": _Spec("str", choices=SCHEDULE_KINDS),
    "data_dim": _Spec("int", low=1),
    "cond_dim": _Spec("int", low=1),
    "hidden": _Spec("ints", low=1),
    "n_encoder": _Spec("int", low=1),
    "time_freqs": _Spec("int", low=1),
    "per_layer_gate": _Spec("bool"),
    "steps": _Spec("int", low=1),
    "batch_size": _Spec("int", low=1),
    "learning_rate": _Spec("float", low=0.0),
    "delta_t": _Spec("int", low=0),
    "grid_n": _Spec("int", low=1),
    "ema_gamma": _Spec("float", low=0.0, high=1.0),
    "predictor": _Spec("str", choices=PREDICTOR_KINDS),
    "d_eps": _Spec("str", choices=("l2",)),
    "d_x": _Spec("str", choices=("l2_data", "smooth_l1", "none")),
    "guidance_weight": _Spec("float", low=0.0),
    "time_mode": _Spec("str", choices=("shared", "per_item")),
    "freeze_mode": _Spec("str", choices=("full", "adapter_only")),
    "optimizer": _Spec("str", choices=("sgd", "adam")),
    "target_time": _Spec("str", choices=("s", "t")),
    "adam_beta1": _Spec("float", low=0.0, high=1.0),
    "adam_beta2": _Spec("float", low=0.0, high=1.0),
    "adam_eps": _Spec("float", low=0.0),
    "dataset": _Spec("str", choices=DATASET_KINDS),
    "n_samples": _Spec("int", low=1),
    "data_seed": _Spec("int"),
    "n_components": _Spec("int", low=2),
    "radius": _Spec("float", low=0.0),
    "noise": _Spec("float", low=0.0),
    "length": _Spec("int", low=2),
    "pool": _Spec("int", low=1),
    "obs_noise": _Spec("float", low=0.0),
    "csv_path": _Spec("str"),
    "init": _Spec("str", choices=INIT_MODES),
    "init_checkpoint": _Spec("str"),
    "pretrain_mode": _Spec("str", choices=PRETRAIN_MODES),
    "checkpoint": _Spec("str"),
    "sample_k": _Spec("int", low=1),
    "sample_n": _Spec("int", low=1),
    "eval_ks": _Spec("ints", choices=ALLOWED_KS),
    "eval_seeds": _Spec("int", low=1),
    "eval_n": _Spec("int", low=2),
    "metrics_every": _Spec("int", low=1),
    "out_dir": _Spec("str"),
    "seed": _Spec("int"),
}

assert set(_SCHEMA) == {f.name for f in dataclasses.fields(RunConfig)}


def _parse_scalar(key: str, raw: str, spec: _Spec, where: str):
    if spec.kind == "int":
        try:
            val = int(raw)
        except ValueError:
            raise ConfigError(f"{where}: key '{key}': expected an integer, got {raw!r}") from None
    elif spec.kind == "float":
        try:
            val = float(raw)
        except ValueError:
            raise ConfigError(f"{where}: key '{key}': expected a number, got {raw!r}") from None
    elif spec.kind == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"{where}: key '{key}': expected true or false, got {raw!r}")
        return raw == "true"
    elif spec.kind == "str":
        val = raw
        if spec.choices and val not in spec.choices:
            raise ConfigError(
                f"{where}: key '{key}': {val!r} is not one of {', '.join(spec.choices)}"
            )
        return val
    else:  # pragma: no cover - schema kinds are closed
        raise ConfigError(f"{where}: key '{key}': unhandled kind {spec.kind}")
    if spec.choices and val not in spec.choices:
        raise ConfigError(f"{where}: key '{key}': {val} is not one of {spec.choices}")
    if spec.low is not None and val < spec.low:
        raise ConfigError(f"{where}: key '{key}': {val} is below the minimum {spec.low}")
    if spec.high is not None and val > spec.high:
        raise ConfigError(f"{where}: key '{key}': {val} is above the maximum {spec.high}")
    return val


def _parse_value(key: str, raw: str, spec: _Spec, where: str):
    if spec.kind == "ints":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{where}: key '{key}': expected a comma-separated integer list")
        item = _Spec("int", choices=spec.choices, low=spec.low, high=spec.high)
        return tuple(_parse_scalar(key, p, item, where) for p in parts)
    return _parse_scalar(key, raw, spec, where)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys are errors."""
    values: dict[str, object] = {}
    first_line: dict[str, int] = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{where}: unknown key '{key}'")
        if key in values:
            raise ConfigError(
                f"{where}: duplicate key '{key}' (first set on line {first_line[key]})"
            )
        values[key] = _parse_value(key, raw, _SCHEMA[key], where)
        first_line[key] = lineno
    cfg = RunConfig(**values)
    _cross_validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=str(path))


def _cross_validate(cfg: RunConfig) -> None:
    # Arch and DistillConfig carry their own invariants; surface them as config errors.
    try:
        arch_from(cfg)
        distill_from(cfg)
    except (ModelError, DistillError) as e:
        raise ConfigError(str(e)) from e
    if cfg.dataset == "toy_sr" and cfg.length % cfg.pool != 0:
        raise ConfigError(f"key 'pool': {cfg.pool} does not divide length {cfg.length}")


def arch_from(cfg: RunConfig) -> Arch:
    return Arch(
        data_dim=cfg.data_dim,
        cond_dim=cfg.cond_dim,
        hidden=cfg.hidden,
        n_encoder=cfg.n_encoder,
        time_freqs=cfg.time_freqs,
        per_layer_gate=cfg.per_layer_gate,
    )


def distill_from(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        delta_t=cfg.delta_t,
        grid_n=cfg.grid_n,
        ema_gamma=cfg.ema_gamma,
        predictor=cfg.predictor,
        d_eps=cfg.d_eps,
        d_x=cfg.d_x,
        guidance_weight=cfg.guidance_weight,
        time_mode=cfg.time_mode,
        freeze_mode=cfg.freeze_mode,
        optimizer=cfg.optimizer,
        target_time=cfg.target_time,
        seed=cfg.seed,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
    )


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, tuple):
        return ",".join(str(v) for v in val)
    if isinstance(val, float):
        return repr(val)  # shortest text that parses back to the same double
    return str(val)


def config_to_text(cfg: RunConfig) -> str:
    """Canonical echo: every key on its own sorted line; parses back to cfg."""
    lines = [
        f"{name} = {_format_value(getattr(cfg, name))}"
        for name in sorted(f.name for f in dataclasses.fields(RunConfig))
    ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of the canonical echo minus out_dir, which is plumbing, not semantics."""
    text = "\n".join(
        line for line in config_to_text(cfg).splitlines()
        if not line.startswith("out_dir ")
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, out_dir=None, seed=None) -> RunConfig:
    updates = {}
    if out_dir is not None:
        updates["out_dir"] = str(out_dir)
    if seed is not None:
        updates["seed"] = int(seed)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def validate_for_command(cfg: RunConfig, command: str) -> None:
    """Keys that become required once a particular subcommand is chosen."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}; expected one of {COMMANDS}")
    if cfg.dataset == "csv" and not cfg.csv_path and command != "verify":
        raise ConfigError("missing required key 'csv_path' (dataset = csv)")
    if command == "distill" and cfg.init == "pretrained" and not cfg.init_checkpoint:
        raise ConfigError("missing required key 'init_checkpoint' (init = pretrained)")
    if command in ("sample", "eval") and not cfg.checkpoint:
        raise ConfigError(f"missing required key 'checkpoint' ({command} needs a model)")
