"""Experiment orchestration: TOML configs, training loop, metric sinks, sweeps."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from . import diag
from .linalg import MsignMode, norm
from .manifold import Kind, ManifoldSpec, RadiusRule, radius_for, retract, tangent_project
from .model import LayerSpec, ModelError, TaskSpec, batch_at, bayes_loss, eval_loss, init_params, loss_and_grad, make_dataset
from .optim import LrSchedule, OptimizerState, adamw_step, fso_step, lr_at, macro_step, muon_step, muonh_step
from .rng import derive_seed

log = logging.getLogger(__name__)

OPTIMIZERS = ("macro", "muonh", "fso", "muon")
DIVERGENCE_LIMIT = 1e12

DIAG_FIELDS = (
    "rel_lr", "vio", "stable_rank", "feasibility", "alpha", "theta_fro", "theta_fro_exact",
    "theta_u", "theta_v", "spectral_gap", "wedin_bound", "degenerate", "stationary",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "macro"
    beta: float = 0.9
    c: float = 1.0
    epsilon: float = 1e-8
    r: float = 1.0
    msign: str = "exact"
    weight_decay: float = 0.0
    inner_tol: float = 1e-4
    inner_cap: int = 10
    adamw_lr: float = 5e-3
    adamw_betas: tuple = (0.9, 0.95)
    adamw_eps: float = 1e-8
    shape_scale: bool = False


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    layers: tuple = ()
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    steps: int = 100
    seed: int = 0
    diag_every: int = 1
    name: str = "run"

    def validate(self) -> "RunConfig":
        if self.optimizer.name not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer.name!r}")
        if self.steps < 0 or self.diag_every < 1:
            raise ConfigError("steps must be >= 0 and diag_every >= 1")
        if self.steps > self.schedule.total_steps:
            raise ConfigError("schedule.total_steps must cover every step")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        if self.task.kind == "frobenius_nearest_point":
            if len(self.layers) != 1:
                raise ConfigError("the nearest-point task has exactly one weight matrix")
            if (self.layers[0].d_in, self.layers[0].d_out) != (self.task.d_in, self.task.d_out):
                raise ConfigError("nearest-point layer shape must match the task")
        else:
            if self.layers[0].d_in != self.task.d_in:
                raise ConfigError("first layer d_in must equal task.d_in")
            out = self.task.n_classes if self.task.kind == "synthetic_classification" else self.task.d_out
            if self.layers[-1].d_out != out:
                raise ConfigError(f"last layer d_out must be {out}")
            for a, b in zip(self.layers, self.layers[1:]):
                if a.d_out != b.d_in:
                    raise ConfigError("consecutive layer widths do not chain")
        for layer in self.layers:
            if (self.optimizer.name == "fso" and layer.constrained
                    and Kind.parse(layer.manifold) not in (Kind.FROBENIUS, Kind.SPECTRAL)):
                raise ConfigError("fso requires frobenius_sphere or spectral_sphere layers")
        MsignMode.parse(self.optimizer.msign)
        return self


# ---------------------------------------------------------------- config io


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw)
    steps = int(raw.get("steps", 100))
    sched = raw.pop("schedule", {})
    sched.setdefault("total_steps", max(steps, 1))
    opt = raw.pop("optimizer", {})
    if "adamw_betas" in opt:
        opt["adamw_betas"] = tuple(opt["adamw_betas"])
    top = {k: raw.pop(k) for k in ("steps", "seed", "diag_every", "name") if k in raw}
    task = _build(TaskSpec, raw.pop("task", {}), "task")
    layers = tuple(_build(LayerSpec, d, "layers") for d in raw.pop("layers", []))
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    cfg = RunConfig(
        task=task,
        layers=layers,
        optimizer=_build(OptimizerConfig, opt, "optimizer"),
        schedule=_build(LrSchedule, sched, "schedule"),
        **top,
    )
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["layers"] = [asdict(layer) for layer in cfg.layers]
    return d


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides such as ``{"schedule.base_lr": 0.01}``."""
    d = config_to_dict(cfg)
    for path, value in overrides.items():
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            node = node[int(k)] if isinstance(node, list) else node[k]
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = value
        elif last not in node:
            raise ConfigError(f"unknown config path {path!r}")
        else:
            node[last] = value
    for layer in d["layers"]:
        layer.pop("weight_names", None)
    d["optimizer"]["adamw_betas"] = list(d["optimizer"]["adamw_betas"])
    return config_from_dict(d)


# ---------------------------------------------------------------- sinks


def fmt_float(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _json_value(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        # RFC 8259 has no NaN/Infinity; keep them as strings
        return x if math.isfinite(x) else repr(x)
    return x


class MetricSink:
    """Accumulates metric rows; optionally mirrors them to CSV and JSONL files."""

    def __init__(self, header: list[str], out_dir: Optional[Path] = None):
        self.header = header
        self.rows: list[dict] = []
        self._csv = self._jsonl = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            self._csv = open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8")
            self._jsonl = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
            self._writer = csv.writer(self._csv, lineterminator="\r\n")
            self._writer.writerow(header)

    def emit(self, row: dict) -> None:
        self.rows.append(row)
        if self._csv is not None:
            self._writer.writerow([fmt_float(row.get(k)) if k != "status" else row.get(k, "") for k in self.header])
            self._jsonl.write(json.dumps({k: _json_value(row[k]) for k in self.header if k in row}) + "\n")

    def close(self) -> None:
        for fh in (self._csv, self._jsonl):
            if fh is not None:
                fh.close()


# ---------------------------------------------------------------- run


@dataclass
class ParamSlot:
    name: str
    layer: int
    key: str
    spec: Optional[ManifoldSpec]
    state: Any


def layer_radius(layer: LayerSpec, r: float) -> float:
    if layer.radius is not None:
        return layer.radius
    return radius_for(RadiusRule(r, layer.d_in, layer.d_out), layer.manifold)


def _slots(cfg: RunConfig, params) -> list[ParamSlot]:
    opt = cfg.optimizer
    slots = []
    for i, (layer, p) in enumerate(zip(cfg.layers, params)):
        for key, value in p.items():
            name = f"layer{i}.{key}"
            if key == "gamma":
                slots.append(ParamSlot(name, i, key, None, [np.zeros_like(value), np.zeros_like(value)]))
                continue
            spec = None
            if layer.constrained and opt.name != "muon":
                spec = ManifoldSpec(layer.manifold, layer_radius(layer, opt.r))
            state = OptimizerState.zeros(value.shape, beta=opt.beta, c=opt.c, epsilon=opt.epsilon)
            slots.append(ParamSlot(name, i, key, spec, state))
    return slots


def _diverged(loss, params) -> bool:
    if loss is None or not math.isfinite(loss):
        return True
    for p in params:
        for v in p.values():
            if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > DIVERGENCE_LIMIT:
                return True
    return False


def metric_header(cfg: RunConfig) -> list[str]:
    header = ["step", "status", "eta", "train_loss", "eval_loss"]
    for i, layer in enumerate(cfg.layers):
        if layer.constrained and cfg.optimizer.name != "muon":
            for key in layer.weight_names:
                header += [f"layer{i}.{key}.{f}" for f in DIAG_FIELDS]
        if layer.pre_norm == "learnable_rms":
            header.append(f"layer{i}.gamma.l2")
    return header


@dataclass
class RunSummary:
    name: str
    status: str
    steps_run: int
    initial_loss: float
    final_loss: Optional[float]
    final_eval_loss: Optional[float]
    max_feasibility: float
    optimizer: str
    seed: int
    extra: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json(self) -> str:
        d = {k: _json_value(v) for k, v in asdict(self).items() if k != "extra"}
        d.update({k: _json_value(v) for k, v in self.extra.items()})
        return json.dumps(d, indent=2, sort_keys=True)


def run(cfg: RunConfig, out_dir=None, keep_weights: bool = False):
    """Train per ``cfg``; returns ``(summary, rows)`` and writes sinks if ``out_dir`` is given."""
    cfg.validate()
    t0 = time.perf_counter()
    opt = cfg.optimizer
    mode = MsignMode.parse(opt.msign)
    data = make_dataset(cfg.task)
    params = init_params(cfg.layers, cfg.seed)
    slots = _slots(cfg, params)
    for s in slots:
        if s.spec is not None:
            params[s.layer][s.key] = retract(s.spec, params[s.layer][s.key])

    sink = MetricSink(metric_header(cfg), Path(out_dir) if out_dir is not None else None)
    status = "ok"
    max_feas = 0.0
    loss = None
    initial_loss = None
    steps_run = 0
    try:
        for t in range(cfg.steps + 1):
            x, y = batch_at(cfg.task, data, t)
            try:
                loss, grads = loss_and_grad(cfg.task, cfg.layers, params, data, x, y)
            except ModelError:
                loss, grads = float("nan"), None
            if initial_loss is None:
                initial_loss = loss
            if _diverged(loss, params) or grads is None:
                status = "diverged"
                sink.emit({"step": t, "status": status, "train_loss": loss})
                break
            if t == cfg.steps:
                break
            eta = lr_at(cfg.schedule, t)
            log_now = t % cfg.diag_every == 0
            row = {"step": t, "status": "ok", "eta": eta, "train_loss": loss}
            for s in slots:
                w = params[s.layer][s.key]
                g = grads[s.layer][s.key]
                if s.key == "gamma":
                    m, v = s.state
                    new, m, v = adamw_step(w, g, m, v, t + 1, opt.adamw_lr, opt.adamw_betas, opt.adamw_eps)
                    s.state = [m, v]
                    params[s.layer][s.key] = new
                    if log_now:
                        row[f"{s.name}.l2"] = float(np.linalg.norm(new))
                    continue
                if s.spec is None:
                    res = muon_step(w, g, s.state, eta, opt.weight_decay, mode, opt.shape_scale)
                elif opt.name == "macro":
                    res = macro_step(w, g, s.state, s.spec, eta, mode)
                elif opt.name == "muonh":
                    res = muonh_step(w, g, s.state, s.spec, eta, mode)
                else:
                    res = fso_step(w, g, s.state, s.spec, eta, opt.inner_tol, opt.inner_cap, mode)
                params[s.layer][s.key] = res.w
                if s.spec is not None:
                    if log_now:
                        d = diag.measure_step(t, res, opt.c).as_dict()
                        max_feas = max(max_feas, d["feasibility"])
                        row.update({f"{s.name}.{k}": d[k] for k in DIAG_FIELDS})
            steps_run = t + 1
            if log_now:
                if cfg.task.kind != "frobenius_nearest_point" and t % (cfg.diag_every * 10) == 0:
                    row["eval_loss"] = eval_loss(cfg.task, cfg.layers, params, data)
                sink.emit(row)
    finally:
        sink.close()

    final_eval = None
    if status == "ok":
        final_eval = eval_loss(cfg.task, cfg.layers, params, data)
    extra = {"config": config_to_dict(cfg)}
    if cfg.task.kind == "synthetic_classification":
        extra["bayes_eval_loss"] = bayes_loss(cfg.task, data)
    if cfg.task.kind == "frobenius_nearest_point" and status == "ok":
        spec = slots[0].spec
        w = params[0]["w"]
        if spec is not None and spec.kind is Kind.FROBENIUS:
            w_star = spec.radius * data.target / np.linalg.norm(data.target)
            extra["final_dist"] = float(np.linalg.norm(w - w_star))
            extra["final_riemannian_grad_nuclear"] = norm(tangent_project(spec, w, 2 * (w - data.target)), "nuclear")
    summary = RunSummary(
        name=cfg.name, status=status, steps_run=steps_run, initial_loss=initial_loss,
        final_loss=loss, final_eval_loss=final_eval, max_feasibility=max_feas,
        optimizer=opt.name, seed=cfg.seed, extra=extra,
        wall_time_s=time.perf_counter() - t0,
    )
    if out_dir is not None:
        # wall time is informational and kept out of the byte-stable summary
        d = json.loads(summary.to_json())
        d.pop("wall_time_s")
        (Path(out_dir) / "summary.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if keep_weights:
        summary.extra["params"] = params
    return summary, sink.rows


# ---------------------------------------------------------------- sweep


def _sweep_point(args):
    cfg, overrides, index = args
    try:
        point = with_overrides(cfg, overrides)
        point = replace(point, seed=derive_seed(cfg.seed, index), name=f"{cfg.name}-{index}")
        summary, _ = run(point)
        return {"index": index, **overrides, "status": summary.status,
                "final_loss": summary.final_loss, "final_eval_loss": summary.final_eval_loss,
                "error": None}
    except Exception as exc:  # crash isolation: one bad point never aborts the sweep
        return {"index": index, **overrides, "status": "error", "final_loss": None,
                "final_eval_loss": None, "error": f"{type(exc).__name__}: {exc}"}


def _sort_key(row):
    v = row["final_eval_loss"]
    ok = v is not None and math.isfinite(v)
    return (0 if ok else 1, v if ok else 0.0, row["index"])


def sweep(base: RunConfig, grid: dict, threads: Optional[int] = None) -> list[dict]:
    """Run the Cartesian product of ``grid`` (dotted path -> values); rows sorted by final eval loss."""
    keys = list(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    jobs = [(base, p, i) for i, p in enumerate(points)]
    if threads is None:
        threads = int(os.environ.get("MACRO_OPT_THREADS", "1"))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    return sorted(rows, key=_sort_key)


def sweep_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_float(r[k]) if isinstance(r[k], (float, int)) and not isinstance(r[k], bool) else ("" if r[k] is None else r[k]) for k in header])
    return buf.getvalue()
