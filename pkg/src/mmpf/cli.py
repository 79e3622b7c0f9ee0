"""Command-line experiment runners.

Every command writes its outputs plus a ``manifest.json`` under ``--out-dir``
(default: ``$MMPF_OUT_DIR`` or ``./runs``). Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .apstar import SolverError, run_apstar
from .core import APStarConfig, uniform_weights
from .data_io import DataError, GroupedDataset, SchemaConfig, ingest_csv, load_dataset, prepare_splits
from .metrics import METRICS, InfiniteLossError, MissingGroupError, PredictionSet, aggregate_splits, evaluate
from .models import (
    InfeasibleTargetError, JointSolver, PluginSolver, TrainConfig, TrainingError, label_equals_group_bundle,
    save_model, train_plugin, train_weighted,
)
from .starsets import SamplingError, run_benchmark, summarize
from .starsets import APStarStrategy, MWUStrategy, RandomStrategy
from .synthetic import (
    OracleSolver, ResourceLimitError, grid_search_minimax, load_spec, pareto_front_trace, write_risk_csv,
)

OUT_DIR_ENV = "MMPF_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("naive", "balanced", "mmpf-joint", "mmpf-plugin")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output plumbing


@contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling path that replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text_atomic(path: Path, text: str) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(text)
    return Path(path)


def write_json_atomic(path: Path, obj) -> Path:
    return write_text_atomic(path, json.dumps(obj, indent=2, default=_to_builtin) + "\n")


def _to_builtin(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o)}")


class Run:
    """Collects artifact paths and writes the manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config = {k: v for k, v in vars(args).items() if k != "func"}
        self.out_dir = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.seeds: list[int] = []
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.artifacts.append(str(p))
        return p

    def finish(self, extra: dict | None = None) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "wall_clock_s": time.perf_counter() - self.start,
            "version": __version__,
            **(extra or {}),
        }
        return write_json_atomic(self.out_dir / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# commands


def _read_spec(path):
    if path is None:
        raise ConfigError("--spec is required")
    if not Path(path).is_file():
        raise ConfigError(f"spec file not found: {path}")
    return load_spec(path)


def _apstar_config(args) -> APStarConfig:
    return APStarConfig(alpha=args.alpha, k_min=args.k_min, max_iterations=args.max_iters,
                        patience_iters=args.max_iters)


def cmd_synth_front(args) -> int:
    spec = _read_spec(args.spec)
    run = Run("synth-front", args)
    rows = pareto_front_trace(spec, args.loss, args.n_points)
    with atomic_path(run.path("front.csv")) as tmp:
        write_risk_csv(rows, tmp)
    run.finish({"n_rows": len(rows)})
    print(f"wrote {len(rows)} front points to {run.out_dir / 'front.csv'}")
    return EXIT_OK


def cmd_synth_apstar(args) -> int:
    spec = _read_spec(args.spec)
    cfg = _apstar_config(args)
    run = Run("synth-apstar", args)
    grid = None
    if not args.no_grid:
        g_mu, g_r = grid_search_minimax(spec, args.loss, args.grid_resolution)
        grid = {"mu": g_mu.tolist(), "risks": g_r.tolist(), "minimax": float(g_r.max())}
        write_json_atomic(run.path("grid.json"), grid)
    finals = []
    for s in range(args.runs):
        seed = args.seed + s
        run.seeds.append(seed)
        if args.init == "uniform":
            mu0 = uniform_weights(spec.n_groups)
        else:
            mu0 = np.random.default_rng(seed).dirichlet(np.ones(spec.n_groups))
        trace = run_apstar(OracleSolver(spec, args.loss), mu0, cfg)
        with atomic_path(run.path(f"trace_seed{seed}.jsonl")) as tmp:
            trace.write_jsonl(tmp)
        finals.append({"seed": seed, "mu": trace.best_mu.tolist(), "risks": trace.best_risks.tolist(),
                       "minimax": trace.best_minimax, "iterations": trace.n_iterations})
    minimax = np.array([f["minimax"] for f in finals])
    summary = {
        "loss": args.loss,
        "runs": finals,
        "minimax_mean": float(minimax.mean()),
        "minimax_std": float(minimax.std(ddof=1)) if minimax.size > 1 else 0.0,
        "mu_mean": np.mean([f["mu"] for f in finals], axis=0).tolist(),
        "mu_std": (np.std([f["mu"] for f in finals], axis=0, ddof=1) if len(finals) > 1
                   else np.zeros(spec.n_groups)).tolist(),
    }
    if grid is not None:
        summary["grid_minimax"] = grid["minimax"]
        summary["relative_error"] = ((minimax - grid["minimax"]) / grid["minimax"]).tolist()
    write_json_atomic(run.path("summary.json"), summary)
    run.finish()
    print(json.dumps({k: summary[k] for k in summary if k != "runs"}, indent=2))
    return EXIT_OK


def _parse_strategies(text: str, seed: int):
    out = []
    for name in (s.strip().lower() for s in text.split(",") if s.strip()):
        if name == "apstar":
            out.append(APStarStrategy())
        elif name == "random":
            out.append(RandomStrategy(seed))
        elif name == "mwu":
            out.append(MWUStrategy())
        else:
            raise ConfigError(f"unknown strategy {name!r}")
    if not out:
        raise ConfigError("no strategies given")
    return out


def cmd_starset_bench(args) -> int:
    strategies = _parse_strategies(args.strategies, args.seed)
    if args.n_families < 1:
        raise ConfigError("--n-families must be >= 1")
    run = Run("starset-bench", args)
    run.seeds.append(args.seed)
    rows = run_benchmark(args.n_families, args.seed, strategies, args.max_iters)
    with atomic_path(run.path("benchmark.csv")) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["seed", "ratio", "strategy", "iterations", "timeout_flag"])
            w.writeheader()
            w.writerows(rows)
    summary = summarize(rows)
    write_json_atomic(run.path("summary.json"), summary)
    run.finish()
    for b in summary["bins"]:
        print(f"[{b['lo']:.3f}, {b['hi']:.3f}) n={b['n_families']:4d} median={b['median']} timeouts={b['timeouts']}")
    return EXIT_OK


def _load_data(args) -> tuple[GroupedDataset, object]:
    if args.data is None:
        raise ConfigError("--data is required")
    path = Path(args.data)
    if path.suffix == ".npz":
        if not path.is_file():
            raise ConfigError(f"data file not found: {path}")
        return load_dataset(path), None
    if args.schema is None:
        raise ConfigError("--schema is required for CSV data")
    if not path.is_file() or not Path(args.schema).is_file():
        raise ConfigError(f"missing data or schema file: {path}, {args.schema}")
    schema = SchemaConfig.from_file(args.schema)
    return ingest_csv(path, schema)


def _is_label_equals_group(ds: GroupedDataset) -> bool:
    return ds.n_classes == ds.n_groups and np.array_equal(ds.labels, ds.groups)


def _train_one(mode: str, train, val, cfg: TrainConfig, apcfg: APStarConfig):
    """Returns ``(predictor, mu, extra)``."""
    n = train.n_groups
    if mode == "naive":
        naive = TrainConfig(**{**asdict(cfg), "sampling": "naive"})
        res = train_weighted(train, val, train.group_counts() / len(train), naive)
        return res.model, res.mu, {"epochs": res.epochs}
    if mode == "balanced":
        res = train_weighted(train, val, uniform_weights(n), cfg)
        return res.model, res.mu, {"epochs": res.epochs}
    if mode == "mmpf-joint":
        trace = run_apstar(JointSolver(train, val, cfg), uniform_weights(n), apcfg)
        return trace.best_handle, trace.best_mu, {"apstar_iterations": trace.n_iterations, "trace": trace}
    if _is_label_equals_group(train):
        balanced = train_weighted(train, val, uniform_weights(n), cfg).model
        bundle = label_equals_group_bundle(balanced, n)
    else:
        bundle = train_plugin(train, val, cfg)
    trace = run_apstar(PluginSolver(bundle, val, cfg.loss), uniform_weights(n), apcfg)
    return trace.best_handle, trace.best_mu, {"apstar_iterations": trace.n_iterations, "trace": trace}


def cmd_train(args) -> int:
    if args.mode not in MODES:
        raise ConfigError(f"--mode must be one of {MODES}")
    hidden = tuple(int(h) for h in args.hidden.split(",") if h.strip()) if args.hidden else ()
    cfg = TrainConfig(loss=args.loss, batch_size=args.batch_size, lr=args.lr, max_epochs=args.max_epochs,
                      patience=args.patience, seed=args.seed, hidden=hidden, activation=args.activation)
    apcfg = _apstar_config(args)
    ds, encoder = _load_data(args)
    run = Run("train", args)
    reports = {m: [] for m in METRICS}
    for s, (train, val, test) in enumerate(prepare_splits(ds, encoder, args.seed, args.splits)):
        run.seeds.append(args.seed + s)
        cfg_s = TrainConfig(**{**asdict(cfg), "seed": args.seed + s})
        predictor, mu, extra = _train_one(args.mode, train, val, cfg_s, apcfg)
        trace = extra.pop("trace", None)
        if trace is not None:
            with atomic_path(run.path(f"trace_split{s}.jsonl")) as tmp:
                trace.write_jsonl(tmp)
        if hasattr(predictor, "dims"):
            stem = run.out_dir / f"model_split{s}"
            save_model(predictor, stem, {"config": asdict(cfg_s), "mu": mu, "mode": args.mode})
            run.artifacts += [str(stem.with_suffix(".bin")), str(stem.with_suffix(".json"))]
        preds = PredictionSet(predictor.predict_proba(test.features), test.labels, test.groups, test.n_groups)
        split_reports = {m: evaluate(preds, m) for m in METRICS}
        for m, r in split_reports.items():
            reports[m].append(r)
        write_json_atomic(run.path(f"report_split{s}.json"),
                          {"mu": mu, **extra, "metrics": {m: r.to_json() for m, r in split_reports.items()}})
    summary = {m: aggregate_splits(rs) for m, rs in reports.items()}
    write_json_atomic(run.path("summary.json"), summary)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "sample_mean", "group_mean", "worst", "disparity"])
    for m, agg in summary.items():
        w.writerow([m, *(f"{agg[k]['mean']:.6g}+-{agg[k]['std']:.2g}"
                         for k in ("sample_mean", "group_mean", "worst", "disparity"))])
    write_text_atomic(run.path("summary.csv"), buf.getvalue())
    run.finish()
    print(buf.getvalue(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _alpha(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie strictly between 0 and 1")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmpf", description="Minimax Pareto fairness experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
        sp.add_argument("--seed", type=int, default=0)

    def apstar_flags(sp, max_iters):
        sp.add_argument("--alpha", type=_alpha, default=0.5)
        sp.add_argument("--k-min", type=_positive_int, default=1)
        sp.add_argument("--max-iters", type=_positive_int, default=max_iters)

    sp = sub.add_parser("synth-front", help="trace the two-group Pareto front of an analytic spec")
    sp.add_argument("--spec")
    sp.add_argument("--loss", choices=("bs", "ce"), default="bs")
    sp.add_argument("--n-points", type=_positive_int, default=101)
    common(sp)
    sp.set_defaults(func=cmd_synth_front)

    sp = sub.add_parser("synth-apstar", help="run APStar with the closed-form solver")
    sp.add_argument("--spec")
    sp.add_argument("--loss", choices=("bs", "ce"), default="bs")
    apstar_flags(sp, 500)
    sp.add_argument("--runs", type=_positive_int, default=1, help="number of seeds, starting at --seed")
    sp.add_argument("--init", choices=("random", "uniform"), default="random")
    sp.add_argument("--grid-resolution", type=float, default=None)
    sp.add_argument("--no-grid", action="store_true", help="skip the grid-search reference")
    common(sp)
    sp.set_defaults(func=cmd_synth_apstar)

    sp = sub.add_parser("starset-bench", help="race weight-search strategies on random star-set families")
    sp.add_argument("--n-families", type=int, default=200)
    sp.add_argument("--strategies", default="apstar,random,mwu")
    sp.add_argument("--max-iters", type=_positive_int, default=10_000)
    common(sp)
    sp.set_defaults(func=cmd_starset_bench)

    sp = sub.add_parser("train", help="train and evaluate a model on grouped tabular data")
    sp.add_argument("--data", help="CSV file (with --schema) or a saved .npz dataset")
    sp.add_argument("--schema")
    sp.add_argument("--mode", default="mmpf-joint")
    sp.add_argument("--loss", choices=("bs", "ce"), default="ce")
    sp.add_argument("--splits", type=_positive_int, default=5)
    sp.add_argument("--hidden", default="", help="comma separated hidden widths; empty for a linear model")
    sp.add_argument("--activation", choices=("elu", "relu", "tanh"), default="elu")
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=_positive_int, default=256)
    sp.add_argument("--max-epochs", type=_positive_int, default=500)
    sp.add_argument("--patience", type=_positive_int, default=20)
    apstar_flags(sp, 20)
    common(sp)
    sp.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (DataError, MissingGroupError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SolverError, SamplingError, InfiniteLossError, InfeasibleTargetError,
            ArithmeticError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ResourceLimitError, ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
