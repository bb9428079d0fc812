"""Command line: ``mdrlab run | compare | scan | gradcheck``."""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config
from .diagnostics import clip_saturation_scan
from .experiment import SCHEMA_VERSION, RecordWriter, RunFailed, format_value, read_records, run_training

SEED_ENV = "MDRLAB_SEED"
PACKAGE_DIR = Path(__file__).resolve().parent


def source_hash() -> str:
    """Content hash over the package's Python sources (path + bytes, sorted)."""
    h = hashlib.sha256()
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(path.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def _fail(message: str, code: int = 2) -> int:
    print(f"mdrlab: error: {message}", file=sys.stderr)
    return code


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.set or [])
        if os.environ.get(SEED_ENV):
            cfg = cfg.replace(seeds=[int(os.environ[SEED_ENV])])
        if args.seeds:
            cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
        if args.out:
            cfg = cfg.replace(out=args.out)
    except ConfigError as exc:
        return _fail(str(exc))
    except ValueError as exc:
        return _fail(f"{SEED_ENV}/--seeds: {exc}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(dump_config(cfg), encoding="utf-8")
    files = [f"{cfg.mode}_seed{s}.csv" for s in cfg.seeds]
    manifest = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "build_hash": source_hash(),
        "config": cfg.to_dict(),
        "config_file": "resolved.cfg",
        "csv": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ckpt = None
    if cfg.checkpoint_every:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
    failed = 0
    for seed, name in zip(cfg.seeds, files):
        writer = RecordWriter(out / name)
        try:
            result = run_training(cfg, seed, on_record=writer.write, checkpoint_dir=ckpt)
        except RunFailed as exc:
            writer.write_error(cfg.mode, seed, exc.step, f"{type(exc.cause).__name__}: {exc.cause}")
            print(f"{name}: failed at step {exc.step}: {exc.cause}", file=sys.stderr)
            failed += 1
            continue
        finally:
            writer.close()
        # wall-clock lives beside the CSV so the CSV itself is reproducible
        with open(out / name.replace(".csv", ".timing.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "wall_clock_s"])
            for row, t in zip(result.records, result.wall_clock):
                w.writerow([row["step"], f"{t:.3f}"])
        rewards = result.series("reward_mean")
        print(f"{name}: {len(rewards)} steps, final reward {np.nanmean(rewards[-max(1, len(rewards) // 10):]):.4f}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# compare


def load_runs(pattern: str) -> dict[str, list[dict[str, np.ndarray]]]:
    """Group run CSVs by mode; each run becomes column -> array over ok rows."""
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no CSV files match {pattern!r}")
    versions = {}
    runs: dict[str, list] = {}
    for p in paths:
        version, rows = read_records(p)
        versions[p] = version
        rows = [r for r in rows if r["status"] == "ok"]
        if not rows:
            continue
        cols = {k: np.array([r[k] for r in rows]) for k in rows[0] if k not in ("mode", "status")}
        cols["path"] = p
        runs.setdefault(rows[0]["mode"], []).append(cols)
    if len(set(versions.values())) > 1:
        detail = ", ".join(f"{Path(p).name}={v}" for p, v in versions.items())
        raise ValueError(f"mixed CSV schema versions: {detail}")
    if not runs:
        raise ValueError("matched CSV files contain no completed rows")
    return runs


def band(runs: list[dict], column: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = min(len(r[column]) for r in runs)
    stack = np.stack([r[column][:n] for r in runs])
    return runs[0]["step"][:n], stack.mean(axis=0), stack.std(axis=0)


def final_window_mean(values: np.ndarray, window: int) -> float:
    return float(np.nanmean(values[-window:]))


def summary_rows(runs: dict, window: int) -> list[dict]:
    rows = []
    for mode in sorted(runs):
        finals = [final_window_mean(r["reward_mean"], window) for r in runs[mode]]
        rows.append({"mode": mode, "seeds": len(finals), "final_reward_mean": float(np.mean(finals)),
                     "final_reward_std": float(np.std(finals))})
    return rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mdrlab"
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def cmd_compare(args) -> int:
    try:
        runs = load_runs(args.pattern)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plt = _pyplot()
    metrics = [m for m in args.metrics.split(",") if m]
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for mode in sorted(runs):
            x, mu, sd = band(runs[mode], metric)
            ax.plot(x, mu, label=f"{mode} (n={len(runs[mode])})")
            ax.fill_between(x, mu - sd, mu + sd, alpha=0.25)
        ax.set_xlabel("training step")
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        _save(fig, out / f"{metric}.svg")
        plt.close(fig)
    # reward and mismatch stacked, one column per mode
    modes = sorted(runs)
    fig, axes = plt.subplots(2, len(modes), figsize=(3.5 * len(modes), 5), squeeze=False, sharex="col")
    for j, mode in enumerate(modes):
        for i, metric in enumerate(("reward_mean", "delta_pi_minus")):
            for r in runs[mode]:
                axes[i, j].plot(r["step"], r[metric], lw=1)
            axes[i, j].set_ylabel(metric if j == 0 else "")
        axes[0, j].set_title(mode)
        axes[1, j].set_xlabel("training step")
    fig.tight_layout()
    _save(fig, out / "reward_mismatch.svg")
    plt.close(fig)

    rows = summary_rows(runs, args.window)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format_value(v) for k, v in r.items()})
    print(f"{'mode':<14}{'seeds':>6}{'final reward':>16}{'std':>10}")
    for r in rows:
        print(f"{r['mode']:<14}{r['seeds']:>6}{r['final_reward_mean']:>16.4f}{r['final_reward_std']:>10.4f}")
    return 0


# ---------------------------------------------------------------------------
# scan


def parse_grid(spec: str) -> np.ndarray:
    try:
        start, stop, num = spec.split(":")
        grid = np.linspace(float(start), float(stop), int(num))
    except ValueError:
        raise ValueError(f"grid must look like start:stop:count, got {spec!r}") from None
    if len(grid) < 1:
        raise ValueError("grid needs at least one point")
    return grid


def cmd_scan(args) -> int:
    try:
        grid = parse_grid(args.grid)
        levels = _parse_floats(args.levels)
        scan = clip_saturation_scan(grid, levels, args.eps)
    except ValueError as exc:
        return _fail(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(scan.rows())
    with open(out / "scan.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format_value(v) for k, v in r.items()})
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    series = [0.0] + [d for d in levels if d != 0.0]
    for d in series:
        lo, hi = 1.0 - args.eps - d, 1.0 + args.eps + d
        label = f"clip, eps={args.eps:g}" if d == 0.0 else f"delta_r={d:g}  [{lo:.2f}, {hi:.2f}]"
        ax.plot(grid, np.clip(grid, lo, hi), label=label)
    ax.plot(grid, grid, color="0.6", lw=0.8, ls=":")
    ax.set_xlabel("ratio r")
    ax.set_ylabel("effective clipped ratio")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out / "scan.svg")
    plt.close(fig)
    for lo, hi in scan.intervals:
        print(f"[{lo:g}, {hi:g}]")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .train import ppo_gradcheck_suite

    results = ppo_gradcheck_suite(args.cases, args.seed)
    bad = 0
    for case, res in results:
        status = "ok" if res.passed else "FAIL"
        bad += not res.passed
        print(f"case {case['case']:>3} {case['kind']:<10} hidden={case['hidden']!s:<8} "
              f"checked={res.n_checked:<4} max_abs={res.max_abs_err:.2e} max_rel={res.max_rel_err:.2e} {status}")
    print(f"{len(results) - bad}/{len(results)} passed")
    return 1 if bad else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdrlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mdrlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of one mode and write CSV logs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seeds", help="comma-separated seeds, overrides the config and $MDRLAB_SEED")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="plot mean +- std across seeds and summarise final reward")
    p.add_argument("pattern", help="glob of run CSV files")
    p.add_argument("--out", default="compare")
    p.add_argument("--metrics", default="reward_mean,delta_pi_minus,mean_abs_delta_r,entropy")
    p.add_argument("--window", type=int, default=10, help="final-window length in steps")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("scan", help="clip saturation under bounded ratio perturbations")
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--levels", default="0.05,0.10,0.15", help="comma-separated delta_r levels")
    p.add_argument("--grid", default="0.5:1.5:201", help="ratio grid start:stop:count")
    p.add_argument("--out", default="scan")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("gradcheck", help="finite-difference check of the PPO loss")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
