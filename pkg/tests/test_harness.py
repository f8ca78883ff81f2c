import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from macro_opt import harness
from macro_opt.harness import ConfigError, config_from_dict, config_to_dict, fmt_float, load_config, run, sweep, with_overrides

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_cfg(**top):
    raw = {
        "name": "small", "seed": 3, "steps": 40, "diag_every": 1,
        "task": {"kind": "linear_regression", "d_in": 6, "d_out": 4, "n_samples": 64, "n_eval": 32, "batch_size": 16},
        "optimizer": {"name": "macro"},
        "schedule": {"kind": "constant", "base_lr": 0.05},
        "layers": [
            {"d_in": 6, "d_out": 8, "activation": "relu", "manifold": "frobenius_sphere"},
            {"d_in": 8, "d_out": 4, "pre_norm": "learnable_rms", "manifold": "frobenius_sphere"},
        ],
    }
    raw.update(top)
    return config_from_dict(raw)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load_and_roundtrip(path):
    cfg = load_config(path)
    assert cfg.name == path.stem
    assert with_overrides(cfg, {}) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        small_cfg(bogus=1)
    with pytest.raises(ConfigError):
        small_cfg(optimizer={"name": "sgd"})
    with pytest.raises(ConfigError):
        small_cfg(optimizer={"name": "macro", "momentum": 0.9})
    with pytest.raises(ConfigError):
        small_cfg(layers=[{"d_in": 5, "d_out": 4}])
    with pytest.raises(ConfigError):
        small_cfg(optimizer={"name": "fso"}, layers=[{"d_in": 6, "d_out": 4, "manifold": "oblique_in"}])
    with pytest.raises(ConfigError):
        small_cfg(schedule={"base_lr": -1.0})


def test_overrides():
    cfg = small_cfg()
    out = with_overrides(cfg, {"schedule.base_lr": 0.2, "layers.0.d_out": 8, "optimizer.c": 2.0})
    assert out.schedule.base_lr == 0.2 and out.optimizer.c == 2.0
    with pytest.raises(ConfigError):
        with_overrides(cfg, {"schedule.nope": 1})


def test_fmt_float():
    assert fmt_float(0.1) == "0.10000000000000001"
    assert fmt_float(True) == "1" and fmt_float(3) == "3" and fmt_float(None) == ""
    assert float(fmt_float(math.pi)) == math.pi
    assert fmt_float(math.inf) == "inf"


def test_run_writes_sinks(tmp_path):
    summary, rows = run(small_cfg(), tmp_path)
    assert summary.status == "ok" and summary.steps_run == 40
    assert summary.max_feasibility <= 1e-12
    raw = (tmp_path / "metrics.csv").read_bytes()
    lines = raw.split(b"\r\n")
    assert lines[-1] == b"" and len(lines) == 1 + 40 + 1
    assert b"\n" not in raw.replace(b"\r\n", b"")
    header = lines[0].decode().split(",")
    assert header[:5] == ["step", "status", "eta", "train_loss", "eval_loss"]
    assert "layer1.w.rel_lr" in header
    jl = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(jl) == 40 and jl[3]["step"] == 3
    assert jl[5]["layer0.w.rel_lr"] == pytest.approx(0.05, rel=1e-6)
    js = json.loads((tmp_path / "summary.json").read_text())
    assert js["status"] == "ok" and "wall_time_s" not in js and js["config"]["name"] == "small"


def test_run_is_deterministic(tmp_path):
    cfg = small_cfg()
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("metrics.csv", "metrics.jsonl", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run(replace(cfg, seed=4), tmp_path / "c")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("opt", ["macro", "muonh", "fso", "muon"])
def test_optimizers_reduce_loss(opt):
    summary, _ = run(small_cfg(optimizer={"name": opt}, steps=150,
                               schedule={"kind": "linear_warmup_cosine", "base_lr": 0.05, "warmup_steps": 10}))
    assert summary.status == "ok"
    assert summary.final_loss < summary.initial_loss


def test_divergence_is_reported(tmp_path):
    cfg = load_config(CONFIGS / "diverge_huge_lr.toml")
    summary, rows = run(cfg, tmp_path)
    assert summary.status == "diverged"
    assert rows[-1]["status"] == "diverged"
    assert summary.final_eval_loss is None
    assert b"diverged" in (tmp_path / "metrics.csv").read_bytes()


def test_nearest_point_summary_extras():
    cfg = load_config(CONFIGS / "nearest_point_macro_fro.toml")
    summary, _ = run(cfg)
    assert summary.extra["final_dist"] <= 1e-2
    assert summary.extra["final_riemannian_grad_nuclear"] <= 1e-3


def test_sweep_sorted_and_isolated(monkeypatch):
    cfg = small_cfg(steps=20)
    rows = sweep(cfg, {"schedule.base_lr": [0.01, 0.05, 0.1]}, threads=1)
    assert [r["status"] for r in rows] == ["ok"] * 3
    losses = [r["final_eval_loss"] for r in rows]
    assert losses == sorted(losses)
    bad = sweep(cfg, {"optimizer.name": ["macro", "sgd"]}, threads=1)
    assert {r["status"] for r in bad} == {"ok", "error"}
    assert bad[-1]["error"].startswith("ConfigError")
    csv_text = harness.sweep_to_csv(rows)
    assert csv_text.startswith("index,schedule.base_lr,status") and csv_text.endswith("\r\n")


def test_sweep_parallel_matches_serial():
    cfg = small_cfg(steps=15)
    grid = {"schedule.base_lr": [0.02, 0.08]}
    assert sweep(cfg, grid, threads=2) == sweep(cfg, grid, threads=1)


def test_sweep_threads_from_env(monkeypatch):
    monkeypatch.setenv("MACRO_OPT_THREADS", "1")
    rows = sweep(small_cfg(steps=5), {"seed": [1]})
    assert len(rows) == 1
