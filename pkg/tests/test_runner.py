"""End-to-end run orchestration: pipeline artifacts, locking, exit codes."""

import numpy as np
import pytest

from cdd.checkpoint import load_checkpoint
from cdd.config import RunConfig, parse_config_text
from cdd.data import load_csv_dataset, make_cond_mixture
from cdd.runner import (
    EXIT_CONFIG,
    EXIT_IO,
    LOCK_NAME,
    classify_error,
    make_dataset,
    run,
    verify_checks,
)

BASE = """
hidden = 8,8
n_encoder = 1
time_freqs = 2
steps = 12
batch_size = 16
n_samples = 256
eval_ks = 1,4
eval_seeds = 2
eval_n = 48
sample_n = 32
sample_k = 2
"""


def _cfg(extra: str = "") -> RunConfig:
    return parse_config_text(BASE + extra)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    dirs = {name: root / name for name in ("pre", "dis", "smp", "ev")}
    results = {}
    results["pretrain"] = run("pretrain", _cfg(f"out_dir = {dirs['pre']}\n"))
    assert results["pretrain"].ok, results["pretrain"].message
    ck = dirs["pre"] / "model.cddk"
    results["distill"] = run("distill", _cfg(
        f"out_dir = {dirs['dis']}\ninit = pretrained\ninit_checkpoint = {ck}\n"))
    assert results["distill"].ok, results["distill"].message
    ema = dirs["dis"] / "distilled_ema.cddk"
    results["sample"] = run("sample", _cfg(f"out_dir = {dirs['smp']}\ncheckpoint = {ema}\n"))
    assert results["sample"].ok, results["sample"].message
    results["eval"] = run("eval", _cfg(f"out_dir = {dirs['ev']}\ncheckpoint = {ema}\n"))
    assert results["eval"].ok, results["eval"].message
    return {"dirs": dirs, "results": results}


def test_pretrain_artifacts(pipeline):
    pre = pipeline["dirs"]["pre"]
    model, h = load_checkpoint(pre / "model.cddk")
    assert model.arch.hidden == (8, 8) and len(h) == 16
    lines = (pre / "pretrain_history.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) > 1
    echoed = parse_config_text((pre / "effective_config.cfg").read_text())
    assert echoed == _cfg(f"out_dir = {pre}\n")
    assert not (pre / LOCK_NAME).exists()  # released on completion


def test_distill_artifacts(pipeline):
    dis = pipeline["dirs"]["dis"]
    online, _ = load_checkpoint(dis / "distilled.cddk")
    ema, _ = load_checkpoint(dis / "distilled_ema.cddk")
    assert sorted(online.params) == sorted(ema.params)
    lines = (dis / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,consistency,guidance,cond_mse"
    assert len(lines) >= 2
    payload = pipeline["results"]["distill"].payload
    assert payload["trained_params"] == payload["total_params"]  # full finetune default
    # adaptation re-copies the trained encoder into the condition branch
    pre_model, _ = load_checkpoint(pipeline["dirs"]["pre"] / "model.cddk")
    assert online.params["backbone.layer0.weight"].tobytes() != \
        pre_model.params["backbone.layer0.weight"].tobytes()


def test_sample_artifacts(pipeline):
    smp = pipeline["dirs"]["smp"]
    d = load_csv_dataset(smp / "samples.csv", data_dim=2, cond_dim=4)
    assert d.n == 32
    zlines = (smp / "ztraj.csv").read_text().splitlines()
    assert zlines[0] == "step,row,z0,z1"
    assert len(zlines) == 1 + (2 + 1) * 32  # K+1 time points per row


def test_eval_artifacts(pipeline):
    ev = pipeline["dirs"]["ev"]
    lines = (ev / "metrics.csv").read_text().splitlines()
    assert lines[0] == "k,seed,cond_mse,mmd"
    assert len(lines) == 1 + 2 * 2  # eval_seeds x eval_ks
    assert (ev / "scatter_1.svg").exists() and (ev / "scatter_4.svg").exists()
    payload = pipeline["results"]["eval"].payload
    assert set(payload["median_cond_mse"]) == {1, 4}
    assert all(np.isfinite(v) for v in payload["median_cond_mse"].values())


def test_rerun_from_echo_is_bit_identical(pipeline, tmp_path):
    dis = pipeline["dirs"]["dis"]
    echoed = parse_config_text((dis / "effective_config.cfg").read_text())
    import dataclasses

    again = dataclasses.replace(echoed, out_dir=str(tmp_path / "redo"))
    res = run("distill", again)
    assert res.ok, res.message
    for name in ("metrics.csv", "distilled.cddk", "distilled_ema.cddk"):
        assert (tmp_path / "redo" / name).read_bytes() == (dis / name).read_bytes(), name


def test_locked_directory_refuses_to_run(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / LOCK_NAME).write_text("pid 1\n")
    res = run("pretrain", _cfg(f"out_dir = {out}\n"))
    assert res.exit_code == EXIT_IO and LOCK_NAME in res.message
    assert (out / LOCK_NAME).exists()  # a foreign lock is left in place


def test_missing_out_dir_is_a_config_error():
    assert run("pretrain", _cfg()).exit_code == EXIT_CONFIG
    assert "out_dir" in run("pretrain", _cfg()).message


def test_missing_checkpoint_is_an_io_error(tmp_path):
    res = run("sample", _cfg(f"out_dir = {tmp_path / 's'}\ncheckpoint = /nope.cddk\n"))
    assert res.exit_code == EXIT_IO


def test_arch_mismatch_is_a_config_error(pipeline, tmp_path):
    ck = pipeline["dirs"]["pre"] / "model.cddk"
    wider = BASE.replace("hidden = 8,8", "hidden = 16,16")
    res = run("distill", parse_config_text(
        wider + f"out_dir = {tmp_path / 'd'}\ninit = pretrained\ninit_checkpoint = {ck}\n"))
    assert res.exit_code == EXIT_CONFIG and "architecture" in res.message


def test_dataset_dim_mismatch_is_a_config_error(tmp_path):
    res = run("pretrain", _cfg(f"out_dir = {tmp_path / 'p'}\ncond_dim = 5\n"))
    assert res.exit_code == EXIT_CONFIG and "dims" in res.message


def test_verify_passes_without_an_out_dir():
    res = run("verify", RunConfig())
    assert res.ok and res.payload["all_passed"]
    names = [c["name"] for c in res.payload["checks"]]
    assert "vp_identity" in names and "oracle_kstep_scale" in names
    assert "PASS" in res.payload["table"] and "FAIL" not in res.payload["table"]


def test_verify_writes_table(tmp_path):
    res = run("verify", parse_config_text(f"out_dir = {tmp_path / 'v'}\n"))
    assert res.ok
    assert "PASS" in (tmp_path / "v" / "verify.txt").read_text()


def test_verify_checks_are_all_green():
    checks = verify_checks(seed=3)
    assert len(checks) >= 9
    assert all(ok for _, ok, _ in checks), [c for c in checks if not c[1]]


def test_classify_reraises_genuine_bugs():
    with pytest.raises(KeyError):
        classify_error(KeyError("boom"))


def test_csv_dataset_runs_through_make_dataset(tmp_path):
    d = make_cond_mixture(64, seed=0)
    table = np.hstack([d.x, d.c])
    p = tmp_path / "mix.csv"
    p.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in table) + "\n")
    cfg = parse_config_text(f"dataset = csv\ncsv_path = {p}\n")
    loaded = make_dataset(cfg)
    assert loaded.n == 64 and np.array_equal(loaded.x, d.x)


def test_adapter_only_keeps_backbone_bytes(pipeline, tmp_path):
    ck = pipeline["dirs"]["pre"] / "model.cddk"
    res = run("distill", _cfg(
        f"out_dir = {tmp_path / 'a'}\ninit = pretrained\ninit_checkpoint = {ck}\n"
        "freeze_mode = adapter_only\n"))
    assert res.ok, res.message
    assert res.payload["trained_params"] < 0.5 * res.payload["total_params"]
    start, _ = load_checkpoint(ck)
    final, _ = load_checkpoint(tmp_path / "a" / "distilled.cddk")
    for name, tensor in start.backbone_params().items():
        assert final.params[name].tobytes() == tensor.tobytes(), name
