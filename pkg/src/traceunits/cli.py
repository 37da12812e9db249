"""Experiment runner CLI.

Subcommands: run <config>, gradcheck, timing, eigen, sweep <config>
--lr-grid. Every seed writes its metric CSV plus a manifest recording the
config hash, versions, backend, wall time, and outcome; the manifest is
written even when the seed fails. TRACEUNITS_OUT_ROOT sets the default
output root (falls back to ./runs).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, emit_config, parse_config
from .errors import ConfigError, DivergenceError
from .kernels import BACKEND


def _out_root() -> Path:
    return Path(os.environ.get("TRACEUNITS_OUT_ROOT", "runs"))


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, seed, status: str,
                    wall_time: float, error: str = ""):
    manifest = {
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "status": status,
        "error": error,
        "wall_time_s": wall_time,
        "versions": {
            "traceunits": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernel_backend": BACKEND,
        },
    }
    name = f"manifest_seed{seed}.json" if seed is not None else "manifest.json"
    with open(run_dir / name, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_dir(out: str | None, cfg: ExperimentConfig, fallback: str) -> Path:
    run_dir = Path(out) if out else (_out_root() / (cfg.out or fallback))
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.txt", "w") as fh:
        fh.write(emit_config(cfg))
    return run_dir


def _run_one_seed(cfg: ExperimentConfig, seed: int, run_dir: Path,
                  quiet: bool) -> tuple[bool, str]:
    t0 = time.perf_counter()
    try:
        if cfg.kind == "predict":
            from .predict import run_online_prediction
            metrics = run_online_prediction(cfg, seed,
                                            csv_path=run_dir / f"predict_seed{seed}.csv")
            if not quiet:
                print(f"seed {seed}: final windowed MSRE {metrics.final_windowed_msre:.5f} "
                      f"(constant baseline {metrics.best_constant_msre:.5f})")
        elif cfg.kind == "control":
            from .ppo import run_ppo
            metrics = run_ppo(cfg, seed, csv_path=run_dir / f"ppo_seed{seed}.csv")
            if not quiet:
                tail = metrics.mean_returns[-5:]
                print(f"seed {seed}: mean return (last updates) "
                      f"{np.round(tail, 2).tolist()}")
        else:
            raise ConfigError([f"kind {cfg.kind} is not seed-runnable via run"])
    except (DivergenceError, ConfigError, FloatingPointError, ValueError) as exc:
        _write_manifest(run_dir, cfg, seed, "failed", time.perf_counter() - t0,
                        error=f"{type(exc).__name__}: {exc}")
        if not quiet:
            print(f"seed {seed} failed: {exc}", file=sys.stderr)
        return False, str(exc)
    _write_manifest(run_dir, cfg, seed, "ok", time.perf_counter() - t0)
    return True, ""


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.steps is not None:
        cfg = cfg.replace("experiment", "steps", args.steps)
        cfg.steps = args.steps
    if args.seed:
        cfg.seeds = list(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    cfg = _apply_overrides(cfg, args)
    if cfg.kind == "gradcheck":
        return cmd_gradcheck(args)
    if cfg.kind == "timing":
        return cmd_timing(args)
    if cfg.kind == "eigen":
        args.seeds = len(cfg.seeds)
        args.steps = args.steps or cfg.steps
        return cmd_eigen(args)
    run_dir = _prepare_dir(args.out, cfg, f"{cfg.kind}")
    failures = 0
    for seed in cfg.seeds:
        ok, _ = _run_one_seed(cfg, seed, run_dir, args.quiet)
        failures += 0 if ok else 1
    if not args.quiet:
        print(f"artifacts in {run_dir}")
    return 1 if failures else 0


def cmd_gradcheck(args) -> int:
    from .experiments import run_gradcheck

    t0 = time.perf_counter()
    ok, rows = run_gradcheck()
    cfg = parse_config("[experiment]\nkind = gradcheck\n")
    run_dir = _prepare_dir(args.out, cfg, "gradcheck")
    with open(run_dir / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["architecture", "n", "d", "T", "rtrl_vs_bptt",
                         "bptt_vs_fd", "ok"])
        for r in rows:
            writer.writerow([r["architecture"], r["n"], r["d"], r["T"],
                             repr(r["rtrl_vs_bptt"]), repr(r["bptt_vs_fd"]),
                             int(r["ok"])])
    _write_manifest(run_dir, cfg, None, "ok" if ok else "failed",
                    time.perf_counter() - t0,
                    error="" if ok else "tolerance violation, see gradcheck.csv")
    if not args.quiet:
        worst_exact = max(r["rtrl_vs_bptt"] for r in rows)
        worst_fd = max(r["bptt_vs_fd"] for r in rows)
        print(f"gradcheck {'PASS' if ok else 'FAIL'}: "
              f"worst forward-vs-reverse {worst_exact:.2e}, "
              f"worst vs finite differences {worst_fd:.2e}")
    return 0 if ok else 1


def cmd_timing(args) -> int:
    from .timing import compare_backends, measure_update_time, write_timing_csv

    t0 = time.perf_counter()
    cfg = parse_config("[experiment]\nkind = timing\n")
    run_dir = _prepare_dir(args.out, cfg, "timing")
    records = measure_update_time(repetitions=args.reps)
    write_timing_csv(run_dir / "timing.csv", records)
    backend_rows = compare_backends()
    with open(run_dir / "backends.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["backend", "n", "d", "median_us", "iqr_us", "flagged"])
        for r in backend_rows:
            writer.writerow([r["backend"], r["n"], r["d"], repr(r["median_us"]),
                             repr(r["iqr_us"]), int(r["flagged"])])
    _write_manifest(run_dir, cfg, None, "ok", time.perf_counter() - t0)
    if not args.quiet:
        for method in ("rtrl", "tbptt_incremental", "tbptt_batch_per_sample"):
            rows = [r for r in records if r.method == method]
            times = ", ".join(f"T={r.T}:{r.median_us:.0f}us" for r in rows)
            print(f"{method}: {times}")
        print(f"artifacts in {run_dir}")
    return 0


def cmd_eigen(args) -> int:
    from .experiments import run_eigen_seed

    t0 = time.perf_counter()
    cfg = parse_config("[experiment]\nkind = eigen\n")
    run_dir = _prepare_dir(args.out, cfg, "eigen")
    steps = args.steps or 50_000
    n_seeds = args.seeds
    reached, finals = [], []
    acc_curves, count_curves = [], []
    for seed in range(n_seeds):
        res = run_eigen_seed(seed, steps=steps)
        reached.append(res.reached_perfect_at)
        finals.append(res.mean_complex_final)
        acc_curves.append(res.accuracy)
        count_curves.append(res.n_complex)
        with open(run_dir / f"eigen_seed{seed}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "accuracy", "n_complex"])
            for s, a, c in zip(res.log_steps, res.accuracy, res.n_complex):
                writer.writerow([s, repr(float(a)), repr(float(c))])
    acc_mean = np.mean(np.stack(acc_curves), axis=0)
    count_mean = np.mean(np.stack(count_curves), axis=0)
    with open(run_dir / "eigen_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mean_accuracy", "mean_n_complex"])
        for s, a, c in zip(res.log_steps, acc_mean, count_mean):
            writer.writerow([s, repr(float(a)), repr(float(c))])
    _write_manifest(run_dir, cfg, None, "ok", time.perf_counter() - t0)
    if not args.quiet:
        n_perfect = sum(1 for r in reached if r >= 0)
        print(f"{n_perfect}/{n_seeds} seeds reached perfect recall; "
              f"mean complex count (final tenth) {np.mean(finals):.2f}")
        print(f"artifacts in {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    cfg = _apply_overrides(cfg, args)
    if cfg.kind not in ("predict", "control"):
        print("sweep applies to predict or control configs", file=sys.stderr)
        return 2
    grid = [float(tok) for tok in args.lr_grid.split(",") if tok]
    run_dir = _prepare_dir(args.out, cfg, f"sweep_{cfg.kind}")
    summary = []
    failures = 0
    for lr in grid:
        lr_cfg = cfg.replace("optimizer", "lr", lr)
        lr_dir = run_dir / f"lr_{lr:g}"
        lr_dir.mkdir(parents=True, exist_ok=True)
        with open(lr_dir / "config.txt", "w") as fh:
            fh.write(emit_config(lr_cfg))
        finals = []
        for seed in lr_cfg.seeds:
            ok, _ = _run_one_seed(lr_cfg, seed, lr_dir, args.quiet)
            if not ok:
                failures += 1
                continue
            if cfg.kind == "predict":
                finals.append(_final_msre(lr_dir / f"predict_seed{seed}.csv"))
            else:
                finals.append(_final_return(lr_dir / f"ppo_seed{seed}.csv"))
        summary.append({"lr": lr,
                        "median_final": float(np.median(finals)) if finals else float("nan"),
                        "completed_seeds": len(finals)})
    with open(run_dir / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        metric = "median_final_windowed_msre" if cfg.kind == "predict" else "median_final_mean_return"
        writer.writerow(["lr", metric, "completed_seeds"])
        for row in summary:
            writer.writerow([repr(row["lr"]), repr(row["median_final"]),
                             row["completed_seeds"]])
    if not args.quiet:
        for row in summary:
            print(f"lr {row['lr']:g}: median final {row['median_final']:.5f} "
                  f"({row['completed_seeds']} seeds)")
        print(f"artifacts in {run_dir}")
    return 1 if failures else 0


def _final_msre(path: Path) -> float:
    last = float("nan")
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["windowed_msre"] != "nan":
                last = float(row["windowed_msre"])
    return last


def _final_return(path: Path) -> float:
    last = float("nan")
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["mean_episodic_return"] != "nan":
                last = float(row["mean_episodic_return"])
    return last


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traceunits",
        description="Online recurrent-learning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, action="append", default=[],
                       help="override config seeds (repeatable)")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--steps", type=int, default=None, help="override total steps")
        p.add_argument("--quiet", action="store_true")

    p_run = sub.add_parser("run", help="run a config file")
    p_run.add_argument("config")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_grad = sub.add_parser("gradcheck", help="run the gradient-oracle triangle")
    common(p_grad)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_time = sub.add_parser("timing", help="measure per-update wall time")
    common(p_time)
    p_time.add_argument("--reps", type=int, default=30)
    p_time.set_defaults(fn=cmd_timing)

    p_eig = sub.add_parser("eigen", help="complex-eigenvalue emergence runs")
    common(p_eig)
    p_eig.add_argument("--seeds", type=int, default=30,
                       help="number of seeds (0..N-1)")
    p_eig.set_defaults(fn=cmd_eigen)

    p_sweep = sub.add_parser("sweep", help="learning-rate sweep over a config")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--lr-grid", type=str, required=True,
                         help="comma-separated learning rates")
    common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
