"""``macro-opt`` command line.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure, 3 diverged run.

Matrix files are plain text: a ``rows cols`` header line followed by
``rows * cols`` whitespace-separated decimal numbers in row-major order.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, selftest
from .linalg import LinalgError, msign_ns, msign_svd, norm
from .manifold import Kind, ManifoldError, ManifoldSpec, RadiusRule, radius_for, retract, tangent_project
from .model import ModelError
from .optim import BisectionError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIVERGED = 0, 1, 2, 3
NUMERIC_ERRORS = (LinalgError, ManifoldError, BisectionError, ModelError, ArithmeticError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_matrix(path) -> np.ndarray:
    try:
        tokens = Path(path).read_text(encoding="utf-8").split()
    except OSError as exc:
        raise UsageError(f"cannot read matrix file {path}: {exc.strerror}") from exc
    try:
        rows, cols = int(tokens[0]), int(tokens[1])
        values = [float(t) for t in tokens[2:]]
    except (IndexError, ValueError) as exc:
        raise UsageError(f"malformed matrix file {path}") from exc
    if rows < 1 or cols < 1 or len(values) != rows * cols:
        raise UsageError(f"malformed matrix file {path}: expected {rows}x{cols} values, got {len(values)}")
    a = np.array(values).reshape(rows, cols)
    if not np.all(np.isfinite(a)):
        raise UsageError(f"matrix file {path} contains non-finite values")
    return a


def format_matrix(a: np.ndarray) -> str:
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    for row in a:
        lines.append(" ".join(format(float(x) + 0.0, ".17g") for x in row))
    return "\n".join(lines) + "\n"


def write_matrix(path, a: np.ndarray) -> None:
    Path(path).write_text(format_matrix(a), encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_msign(args) -> int:
    a = read_matrix(args.input)
    if args.mode == "exact":
        out = msign_svd(a)
    else:
        out = msign_ns(a, args.iters)
    write_matrix(args.out, out)
    print(f"spectral={norm(out, 'spectral'):.17g} nuclear={norm(out, 'nuclear'):.17g}", file=sys.stderr)
    return EXIT_OK


def cmd_project(args) -> int:
    spec = ManifoldSpec(args.manifold, args.radius)
    out = tangent_project(spec, read_matrix(args.w), read_matrix(args.m), check=not args.no_check)
    write_matrix(args.out, out)
    return EXIT_OK


def cmd_retract(args) -> int:
    spec = ManifoldSpec(args.manifold, args.radius, exact_spectral=args.exact_spectral)
    write_matrix(args.out, retract(spec, read_matrix(args.input)))
    return EXIT_OK


def cmd_radius(args) -> int:
    print(format(radius_for(RadiusRule(args.r, args.d_in, args.d_out), args.manifold), ".17g"))
    return EXIT_OK


def _load_config(path):
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return harness.load_config(path)
    except harness.ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    summary, _ = harness.run(cfg, out_dir=args.out)
    print(f"{cfg.name}: status={summary.status} steps={summary.steps_run} final_loss={summary.final_loss}")
    return EXIT_DIVERGED if summary.status == "diverged" else EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"grid entries look like path=v1,v2; got {item!r}")
        parsed = []
        for v in values.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        grid[key] = parsed
    return grid


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    grid = _parse_grid(args.grid)
    try:
        harness.with_overrides(cfg, {k: v[0] for k, v in grid.items()})
    except (harness.ConfigError, KeyError, IndexError) as exc:
        raise UsageError(f"invalid grid: {exc}") from exc
    rows = harness.sweep(cfg, grid, threads=args.threads)
    text = harness.sweep_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- diag replay


DIAG_CHECKS = ("rotation", "wedin", "vio", "rel_lr")
CHECK_FIELDS = {
    "rotation": ("theta_fro", "theta_fro_exact"),
    "wedin": ("theta_u", "theta_v", "wedin_bound"),
    "vio": ("vio",),
    "rel_lr": ("rel_lr",),
}


NONFINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _decode(value):
    # the sink stores non-finite floats as their repr strings
    return NONFINITE.get(value, value) if isinstance(value, str) else value


def _load_rows(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    if not path.is_file():
        raise UsageError(f"{path} not found")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{lineno}: corrupted JSONL ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise UsageError(f"{path}:{lineno}: corrupted JSONL (not an object)")
        rows.append({k: _decode(v) for k, v in row.items()})
    return [r for r in rows if r.get("status", "ok") == "ok"]


def _series(rows, field):
    """``{param_prefix: [(row, value), ...]}`` for non-null occurrences of ``field``."""
    out = {}
    for row in rows:
        for key, value in row.items():
            if key.endswith("." + field) and value is not None:
                prefix = key[: -len(field) - 1]
                out.setdefault(prefix, []).append((row, value))
    return out


def _run_check(name, rows, summary) -> tuple[bool, str]:
    cfg = summary.get("config", {})
    opt = cfg.get("optimizer", {})
    if name == "rotation":
        worst = 0.0
        for prefix, series in _series(rows, "theta_fro").items():
            for row, theta in series:
                worst = max(worst, abs(theta - row[f"{prefix}.theta_fro_exact"]))
        return worst <= 1e-9, f"max |theta_fro - closed form| = {worst:.3e} (tol 1e-9)"
    if name == "wedin":
        worst, n, skipped = -math.inf, 0, 0
        for prefix, series in _series(rows, "theta_u").items():
            for row, tu in series:
                if row.get(f"{prefix}.degenerate"):
                    skipped += 1
                    continue
                lhs = max(math.sin(tu), math.sin(row[f"{prefix}.theta_v"]))
                worst = max(worst, lhs - row[f"{prefix}.wedin_bound"])
                n += 1
        frac = skipped / max(n + skipped, 1)
        return worst <= 1e-9, f"{n} steps, max (sin theta - bound) = {worst:.3e}, degenerate fraction {frac:.3f}"
    if name == "vio":
        parts = []
        for prefix, series in _series(rows, "vio").items():
            vals = np.array([v for _, v in series])
            parts.append(f"{prefix}: mean {vals.mean():.3e} max {vals.max():.3e}")
        return True, "; ".join(parts)
    # rel_lr: locked for MACRO and FSO; MuonH distribution reported only
    c = opt.get("c", 1.0)
    locked = opt.get("name") in ("macro", "fso")
    worst = 0.0
    parts = []
    for prefix, series in _series(rows, "rel_lr").items():
        ratios = np.array([v / (c * row["eta"]) for row, v in series if not row.get(f"{prefix}.stationary")])
        if ratios.size:
            worst = max(worst, float(np.max(np.abs(ratios - 1.0))))
            parts.append(f"{prefix}: rel_lr/(c eta) in [{ratios.min():.6f}, {ratios.max():.6f}]")
    if not locked:
        return True, "reported only: " + "; ".join(parts)
    return worst <= 1e-6, f"max |rel_lr/(c eta) - 1| = {worst:.3e} (tol 1e-6); " + "; ".join(parts)


def cmd_diag(args) -> int:
    run_dir = Path(args.run)
    rows = _load_rows(run_dir)
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.is_file() else {}
    selected = DIAG_CHECKS if args.check == "all" else (args.check,)
    all_ok = True
    for name in selected:
        missing = [f for f in CHECK_FIELDS[name] if not _series(rows, f)]
        if missing:
            if args.check != "all":
                raise UsageError(f"check {name!r} needs field {missing[0]!r}, absent from metrics.jsonl")
            print(f"SKIP {name}: no {missing[0]!r} values in this run")
            continue
        ok, detail = _run_check(name, rows, summary)
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all_ok else EXIT_NUMERIC


def cmd_selftest(args) -> int:
    return EXIT_OK if selftest.run_all() else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    kinds = [k.value for k in Kind]
    p = _Parser(prog="macro-opt", description="Manifold-constrained matrix optimizers and diagnostics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("msign", help="polar factor of a matrix file")
    s.add_argument("--in", dest="input", required=True, help="input matrix file")
    s.add_argument("--mode", choices=("exact", "ns"), default="exact", help="exact SVD or Newton-Schulz")
    s.add_argument("--iters", type=int, default=30, help="Newton-Schulz iterations (mode ns)")
    s.add_argument("--out", required=True, help="output matrix file")
    s.set_defaults(func=cmd_msign)

    s = sub.add_parser("project", help="tangent-space projection of M at W")
    s.add_argument("--manifold", choices=kinds, required=True, help="constraint kind")
    s.add_argument("--radius", type=float, required=True, help="constraint radius R")
    s.add_argument("--w", required=True, help="point on the manifold (matrix file)")
    s.add_argument("--m", required=True, help="matrix to project (matrix file)")
    s.add_argument("--out", required=True, help="output matrix file")
    s.add_argument("--no-check", action="store_true", help="skip the on-manifold check for W")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("retract", help="map a matrix onto the constraint set")
    s.add_argument("--manifold", choices=kinds, required=True, help="constraint kind")
    s.add_argument("--radius", type=float, required=True, help="constraint radius R")
    s.add_argument("--in", dest="input", required=True, help="input matrix file")
    s.add_argument("--out", required=True, help="output matrix file")
    s.add_argument("--exact-spectral", action="store_true", help="clip singular values instead of rescaling")
    s.set_defaults(func=cmd_retract)

    s = sub.add_parser("radius", help="practical constraint radius for a layer shape")
    s.add_argument("--manifold", choices=kinds, required=True, help="constraint kind")
    s.add_argument("--r", type=float, default=1.0, help="radius multiplier r")
    s.add_argument("--d-in", type=int, required=True, help="input width")
    s.add_argument("--d-out", type=int, required=True, help="output width")
    s.set_defaults(func=cmd_radius)

    s = sub.add_parser("train", help="run one experiment from a TOML config")
    s.add_argument("--config", required=True, help="TOML run config")
    s.add_argument("--out", required=True, help="directory for metrics.csv, metrics.jsonl, summary.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid sweep over config paths")
    s.add_argument("--config", required=True, help="base TOML run config")
    s.add_argument("--grid", action="append", default=[], help="path=v1,v2 (repeatable), e.g. schedule.base_lr=0.01,0.02")
    s.add_argument("--out", help="CSV output path (default stdout)")
    s.add_argument("--threads", type=int, default=None, help="parallel runs (default $MACRO_OPT_THREADS or 1)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("diag", help="replay a run's metrics through the diagnostic checks")
    s.add_argument("--run", required=True, help="run directory containing metrics.jsonl")
    s.add_argument("--check", choices=("all",) + DIAG_CHECKS, default="all", help="which check to run")
    s.set_defaults(func=cmd_diag)

    s = sub.add_parser("selftest", help="reduced-size invariant battery")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help (0) and on usage errors (1)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"macro-opt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"macro-opt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"macro-opt: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
