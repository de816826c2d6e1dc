"""Run orchestration shared by the command line and the HTTP service.

Every subcommand goes through run(): it validates the config for that
command, locks the output directory with a marker file, echoes the effective
configuration, dispatches, and maps any error onto the exit-code contract
(0 success, 1 config error, 2 numeric failure, 3 I/O).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    deserialize_model,
    load_checkpoint,
    save_checkpoint,
    serialize_model,
)
from .config import (
    ConfigError,
    RunConfig,
    arch_from,
    config_hash,
    config_to_text,
    distill_from,
    validate_for_command,
)
from .data import (
    DataError,
    Dataset,
    batch_iter,
    load_csv_dataset,
    make_cond_mixture,
    make_toy_sr,
)
from .distill import DistillConfig, DistillError, distill_loss, init_trainer, train
from .eval import (
    EvalError,
    MetricReport,
    cond_mse,
    emit_report,
    median_bandwidth,
    mixture_target_fn,
    mmd_rbf,
    paired_target_fn,
)
from .model import (
    AdaptedModel,
    Arch,
    ModelError,
    forward_cond,
    forward_uncond,
    init_adapted,
    param_count,
    trainable_names,
)
from .oracle import GaussianData, OracleVelocityModel, exact_ddim_scale
from .parametrization import (
    ParametrizationError,
    ddim_step_eps,
    ddim_step_v,
    transport_shared_noise,
    triple_from_v,
)
from .pretrain import train_pretrain
from .sampler import SamplerError, sample
from .schedule import ScheduleError, make_schedule

__all__ = [
    "RunResult",
    "run",
    "make_dataset",
    "verify_checks",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERIC",
    "EXIT_IO",
    "LOCK_NAME",
]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
LOCK_NAME = "run.lock"

_CONFIG_ERRORS = (ConfigError, ModelError)
_NUMERIC_ERRORS = (DistillError, SamplerError, ParametrizationError, ScheduleError, EvalError)
_IO_ERRORS = (CheckpointError, DataError, OSError)


@dataclass
class RunResult:
    command: str
    exit_code: int
    message: str
    artifacts: list = field(default_factory=list)
    payload: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


def classify_error(e: BaseException) -> int:
    if isinstance(e, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(e, _NUMERIC_ERRORS):
        return EXIT_NUMERIC
    if isinstance(e, _IO_ERRORS):
        return EXIT_IO
    raise e  # genuine bugs should crash loudly, not hide behind an exit code


def make_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "cond_mixture":
        d = make_cond_mixture(cfg.n_samples, seed=cfg.data_seed,
                              n_components=cfg.n_components, radius=cfg.radius,
                              noise=cfg.noise)
    elif cfg.dataset == "toy_sr":
        d = make_toy_sr(cfg.n_samples, seed=cfg.data_seed, length=cfg.length,
                        pool=cfg.pool, obs_noise=cfg.obs_noise)
    else:
        d = load_csv_dataset(cfg.csv_path, cfg.data_dim, cfg.cond_dim)
    if d.data_dim != cfg.data_dim or d.cond_dim != cfg.cond_dim:
        raise ConfigError(
            f"dataset {d.name} has dims (x={d.data_dim}, c={d.cond_dim}) but the "
            f"config says (data_dim={cfg.data_dim}, cond_dim={cfg.cond_dim})"
        )
    return d


def _target_fn(dataset: Dataset):
    if dataset.component_means is not None:
        return mixture_target_fn(dataset.component_means)
    return paired_target_fn(dataset.c, dataset.x)


def _load_for_training(cfg: RunConfig) -> AdaptedModel:
    """Re-adapt a saved backbone: copy its encoder into the condition branch."""
    loaded, _ = load_checkpoint(cfg.init_checkpoint)
    if loaded.arch != arch_from(cfg):
        raise ConfigError(
            f"checkpoint architecture {loaded.arch} != configured {arch_from(cfg)}"
        )
    return init_adapted(arch_from(cfg), cfg.seed, backbone_params=loaded.backbone_params())


def _init_model(cfg: RunConfig) -> AdaptedModel:
    if cfg.init == "pretrained":
        return _load_for_training(cfg)
    return init_adapted(arch_from(cfg), cfg.seed)


def _write_rows(path: Path, columns: list, rows: list) -> Path:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col, float("nan"))
            cells.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def _do_pretrain(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    sched = make_schedule(cfg.schedule)
    dataset = make_dataset(cfg)
    dcfg = distill_from(cfg)
    model = _init_model(cfg)
    batches = batch_iter(dataset, dcfg.batch_size, seed=cfg.seed)
    history = train_pretrain(model, sched, batches, dcfg, mode=cfg.pretrain_mode,
                             metrics_every=cfg.metrics_every)
    path = out / "model.cddk"
    save_checkpoint(model, path, config_hash(cfg))
    artifacts.append(path)
    artifacts.append(_write_rows(out / "pretrain_history.csv", ["step", "loss"], history))
    return {"final_loss": history[-1]["loss"], "checkpoint": str(path),
            "mode": cfg.pretrain_mode}


def _probe_eval_fn(cfg: RunConfig, dataset: Dataset, sched):
    """Small fixed conditional-reconstruction probe for the metrics stream."""
    rng = np.random.default_rng(cfg.seed + 7)
    n = min(128, dataset.n)
    idx = rng.integers(0, dataset.n, size=n)
    probe_c = dataset.c[idx]
    target = _target_fn(dataset)

    def eval_fn(state) -> dict:
        run = sample(state.target, sched, probe_c, k=cfg.sample_k, seed=cfg.seed)
        return {"cond_mse": cond_mse(run.output, probe_c, target)}

    return eval_fn


def _do_distill(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    sched = make_schedule(cfg.schedule)
    dataset = make_dataset(cfg)
    dcfg = distill_from(cfg)
    state = init_trainer(_init_model(cfg), sched, dcfg)
    train(state, batch_iter(dataset, dcfg.batch_size, seed=cfg.seed),
          metrics_every=cfg.metrics_every, eval_fn=_probe_eval_fn(cfg, dataset, sched))
    for name, model in (("distilled.cddk", state.online), ("distilled_ema.cddk", state.target)):
        path = out / name
        save_checkpoint(model, path, config_hash(cfg))
        artifacts.append(path)
    cols = ["step", "loss", "consistency", "guidance", "cond_mse"]
    artifacts.append(_write_rows(out / "metrics.csv", cols, state.history))
    final = state.history[-1]
    return {
        "final": final,
        "trained_params": param_count(state.online.params, trainable_names(state.online)),
        "total_params": param_count(state.online.params),
    }


def _do_sample(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    model, _ = load_checkpoint(cfg.checkpoint)
    sched = make_schedule(cfg.schedule)
    dataset = make_dataset(cfg)
    rng = np.random.default_rng(cfg.seed)
    idx = rng.integers(0, dataset.n, size=cfg.sample_n)
    c = dataset.c[idx]
    run = sample(model, sched, c, k=cfg.sample_k, seed=cfg.seed)

    # samples.csv doubles as a loadable csv dataset: x columns then c columns
    table = np.hstack([run.output, c])
    path = out / "samples.csv"
    path.write_text(
        "\n".join(",".join(repr(float(v)) for v in row) for row in table) + "\n"
    )
    artifacts.append(path)

    lines = ["step,row," + ",".join(f"z{i}" for i in range(run.output.shape[1]))]
    for step, z in enumerate(run.z_traj):
        for r in range(z.shape[0]):
            lines.append(f"{step},{r}," + ",".join(repr(float(v)) for v in z[r]))
    zpath = out / "ztraj.csv"
    zpath.write_text("\n".join(lines) + "\n")
    artifacts.append(zpath)
    return {"n": int(run.output.shape[0]), "k": cfg.sample_k,
            "output_mean_abs": float(np.mean(np.abs(run.output)))}


def _do_eval(cfg: RunConfig, out: Path, artifacts: list) -> dict:
    model, _ = load_checkpoint(cfg.checkpoint)
    sched = make_schedule(cfg.schedule)
    dataset = make_dataset(cfg)
    target = _target_fn(dataset)
    ref0_idx = np.random.default_rng(cfg.seed).integers(0, dataset.n, size=cfg.eval_n)
    bandwidth = median_bandwidth(dataset.x[ref0_idx], dataset.x[ref0_idx])
    rows, scatter = [], {}
    trajectory = None
    for si in range(cfg.eval_seeds):
        rng = np.random.default_rng(cfg.seed + si)
        idx = rng.integers(0, dataset.n, size=cfg.eval_n)
        c, ref = dataset.c[idx], dataset.x[idx]
        for k in cfg.eval_ks:
            sr = sample(model, sched, c, k=k, seed=cfg.seed + si)
            rows.append({
                "k": k, "seed": si,
                "mmd": mmd_rbf(sr.output, ref, bandwidth=bandwidth),
                "cond_mse": cond_mse(sr.output, c, target),
            })
            if si == 0:
                scatter[k] = (sr.output[:, :2].copy(), ref[:, :2].copy())
                if k == max(cfg.eval_ks) and dataset.name == "toy_sr":
                    one = sample(model, sched, c[:1], k=k, seed=cfg.seed)
                    trajectory = (tuple(x[0] for x in one.xhat_traj), ref[0])
    report = MetricReport(rows=rows, seeds=tuple(range(cfg.eval_seeds)),
                          config_hash=config_hash(cfg), bandwidth=bandwidth,
                          scatter=scatter, trajectory=trajectory)
    artifacts.extend(emit_report(report, out))
    medians = {
        k: float(np.median([r["cond_mse"] for r in rows if r["k"] == k]))
        for k in cfg.eval_ks
    }
    return {"median_cond_mse": medians, "bandwidth": bandwidth}


def verify_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Self-contained pass/fail table over the core algebraic invariants."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, bool, str]] = []

    def add(name: str, err: float, tol: float):
        checks.append((name, bool(err <= tol), f"max err {err:.3e} (tol {tol:.0e})"))

    from .schedule import CosineSchedule, LinearAlpha2Schedule

    worst = 0.0
    for sched in (CosineSchedule(), LinearAlpha2Schedule()):
        for t in np.linspace(0.0, 1.0, 501):
            a, s = sched.alpha_sigma(float(t))
            worst = max(worst, abs(a * a + s * s - 1.0))
    add("vp_identity", worst, 1e-12)

    sched = make_schedule("cosine")
    worst = 0.0
    for _ in range(200):
        t = float(rng.uniform(0.05, 0.95))
        z = rng.standard_normal(3)
        v = rng.standard_normal(3)
        tr = triple_from_v(sched, z, v, t)
        a, s = sched.alpha_sigma(t)
        worst = max(worst, float(np.max(np.abs(a * tr.x_hat + s * tr.eps_hat - z))))
    add("triple_reconstruction", worst, 1e-12)

    worst = 0.0
    for _ in range(200):
        t = float(rng.uniform(0.2, 0.95))
        s = float(rng.uniform(0.01, t - 0.05))
        z = rng.standard_normal(3)
        v = rng.standard_normal(3)
        tr = triple_from_v(sched, z, v, t)
        dv = ddim_step_v(sched, z, v, t, s)
        de = ddim_step_eps(sched, z, tr.x_hat, t, s)
        worst = max(worst, float(np.max(np.abs(dv - de))))
    add("form_equivalence", worst, 1e-10)

    worst = 0.0
    for _ in range(200):
        t = float(rng.uniform(0.2, 0.95))
        s = float(rng.uniform(0.01, t - 0.05))
        xh = rng.standard_normal(3)
        eh = rng.standard_normal(3)
        xs, es = transport_shared_noise(sched, xh, eh, t, s)
        worst = max(worst, float(np.max(np.abs(xs - xh))), float(np.max(np.abs(es - eh))))
    add("transport_invariance", worst, 1e-10)

    arch = Arch(data_dim=2, cond_dim=3, hidden=(8, 8), n_encoder=1, time_freqs=2)
    model = init_adapted(arch, seed=seed)
    z = rng.standard_normal((6, 2))
    c = rng.standard_normal((6, 3))
    err = float(np.max(np.abs(forward_cond(model, z, c, 0.5) - forward_uncond(model, z, 0.5))))
    add("zero_gate_equivalence", err, 1e-12)

    oracle = OracleVelocityModel(GaussianData(mean=np.zeros(1), stddev=1.0))
    worst = 0.0
    for k in (1, 4):
        runk = sample(oracle, sched, None, k=k, seed=seed, n=32)
        z1 = np.random.default_rng(seed).standard_normal((32, 1))
        worst = max(worst, float(np.max(np.abs(runk.output - exact_ddim_scale(k) * z1))))
    add("oracle_kstep_scale", worst, 1e-12)

    from .autodiff import grad_check
    from .data import make_cond_mixture as _mk

    dcfg = DistillConfig(steps=1, batch_size=6, seed=seed)
    st = init_trainer(init_adapted(arch, seed=seed), sched, dcfg)
    d = _mk(32, seed=seed, n_components=3)
    batch = next(batch_iter(d, 6, seed=seed))
    batch.t = np.full(6, 0.5)
    from .distill import _loss_tape

    tape, loss_var, parts = _loss_tape(st, batch, dcfg)
    rep = grad_check(tape, loss_var, "backbone.layer0.weight")
    checks.append(("loss_gradient", rep.passed,
                   f"max rel err {rep.max_rel_err:.3e} (tol {rep.tol:.0e})"))

    total, parts = distill_loss(st, batch, dcfg)
    resid = abs(total - (parts["consistency"] + dcfg.guidance_weight * parts["guidance"]))
    add("loss_decomposition", resid, 0.0)

    m2, _ = deserialize_model(serialize_model(model, "hash"))
    exact = all(np.array_equal(m2.params[n], model.params[n]) for n in model.params)
    checks.append(("checkpoint_roundtrip", exact,
                   "bit-exact" if exact else "payload mismatch"))
    return checks


def _do_verify(cfg: RunConfig, out: Path | None, artifacts: list) -> dict:
    checks = verify_checks(cfg.seed)
    lines = [f"{'PASS' if ok else 'FAIL'}  {name:<24} {detail}"
             for name, ok, detail in checks]
    text = "\n".join(lines) + "\n"
    if out is not None:
        path = out / "verify.txt"
        path.write_text(text)
        artifacts.append(path)
    if not all(ok for _, ok, _ in checks):
        raise DistillError("verification failed:\n" + text)
    return {"checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in checks],
            "all_passed": True, "table": text}


_DISPATCH = {
    "pretrain": _do_pretrain,
    "distill": _do_distill,
    "sample": _do_sample,
    "eval": _do_eval,
    "verify": _do_verify,
}


def _acquire_lock(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {out} is locked by {LOCK_NAME}; "
                        "another run may be active") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"pid {os.getpid()}\n")
    return lock


def run(command: str, cfg: RunConfig) -> RunResult:
    try:
        validate_for_command(cfg, command)
        if command != "verify" and not cfg.out_dir:
            raise ConfigError("missing required key 'out_dir' (or pass --out)")
    except Exception as e:
        return RunResult(command, classify_error(e), str(e))

    out = Path(cfg.out_dir) if cfg.out_dir else None
    artifacts: list = []
    lock = None
    try:
        if out is not None:
            lock = _acquire_lock(out)
            echo = out / "effective_config.cfg"
            echo.write_text(config_to_text(cfg))
            artifacts.append(echo)
        payload = _DISPATCH[command](cfg, out, artifacts)
        return RunResult(command, EXIT_OK, f"{command} completed", artifacts, payload)
    except Exception as e:
        return RunResult(command, classify_error(e), f"{type(e).__name__}: {e}", artifacts)
    finally:
        if lock is not None:
            lock.unlink(missing_ok=True)
