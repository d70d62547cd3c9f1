"""Plots for single runs and the paired comparison of run directories."""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import binomtest  # noqa: E402

from .errors import IncompatibleRuns  # noqa: E402
from .runs import read_csv, write_csv  # noqa: E402

IGNORED = ("output.", "variable")
TUNE_METRICS = ("best_p",)
SERVE_METRICS = ("mean_accuracy", "overdue_per_s", "dropped_per_s", "low_rate_accuracy", "low_rate_overdue_per_s")


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# -- single runs ---------------------------------------------------------------------------


def plot_tune(out: Path, progress: list[dict], scaling: list[dict]) -> None:
    groups = defaultdict(list)
    for row in progress:
        groups[(row["seed"], row["workers"])].append((float(row["time"]), float(row["best_p"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (seed, n), pts in sorted(groups.items()):
        t, p = zip(*pts)
        ax.step(t, p, where="post", lw=1, label=f"seed {seed}, {n} workers")
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("best performance so far")
    if len(groups) <= 8:
        ax.legend(fontsize=7)
    _save(fig, out / "best_p.png")
    if scaling:
        by_n = defaultdict(list)
        for row in scaling:
            if row["time_to_target"] != "":
                by_n[int(row["workers"])].append(float(row["time_to_target"]))
        if by_n:
            ns = sorted(by_n)
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.plot(ns, [np.mean(by_n[n]) for n in ns], "o-")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("workers")
            ax.set_ylabel("time to target (s)")
            _save(fig, out / "scaling.png")


def plot_serve(out: Path, series: dict, training: list[dict]) -> None:
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for tag, met in series.items():
        axes[0].plot(met.t, met.accuracy(), lw=0.8, label=tag)
        axes[1].plot(met.t, met.overdue / met.window, lw=0.8, label=tag)
    axes[0].set_ylabel("accuracy")
    axes[1].set_ylabel("overdue / s")
    axes[1].set_xlabel("time (s)")
    if len(series) <= 8:
        axes[0].legend(fontsize=7)
    _save(fig, out / "timeseries.png")
    if training:
        curves = defaultdict(list)
        for row in training:
            curves[(row["seed"], row["beta"])].append(row["reward"])
        fig, ax = plt.subplots(figsize=(6, 4))
        for (seed, beta), r in sorted(curves.items()):
            ax.plot(r, lw=1, label=f"seed {seed}, beta {beta:g}")
        ax.set_xlabel("episode")
        ax.set_ylabel("episode reward")
        if len(curves) <= 8:
            ax.legend(fontsize=7)
        _save(fig, out / "training.png")


# -- comparison -----------------------------------------------------------------------------


def _flatten(obj, prefix="") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "table":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _declared(cfg: dict) -> set[str]:
    return {v.strip() for v in str(cfg.get("variable", "")).split(",") if v.strip()}


def check_compatible(configs: list[dict], commands: list[str]) -> None:
    if len(set(commands)) > 1:
        raise IncompatibleRuns(f"runs come from different commands: {sorted(set(commands))}")
    declared = set().union(*(_declared(c) for c in configs))
    flat = [_flatten(c) for c in configs]
    keys = set().union(*flat)
    bad = []
    for k in sorted(keys):
        if k.startswith(IGNORED) or k in declared:
            continue
        if len({json.dumps(f.get(k), sort_keys=True) for f in flat}) > 1:
            bad.append(k)
    if bad:
        raise IncompatibleRuns(f"runs differ on undeclared fields: {', '.join(bad)}")


def load_run(path: Path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads((path / "config.json").read_text(encoding="utf-8"))
        meta = json.loads((path / "run.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise IncompatibleRuns(f"{path} is not a completed run directory ({e.filename} missing)") from None
    return {"path": path, "config": cfg, "command": meta["command"], "metrics": _metrics(path, meta["command"])}


def _metrics(path: Path, command: str) -> dict:
    """``{pair_key: {metric: value}}`` where pair keys match across runs."""
    out = {}
    if command == "tune":
        best = json.loads((path / "best.json").read_text(encoding="utf-8"))
        for row in best if isinstance(best, list) else [best]:
            out[(row["seed"], row["workers"])] = {"best_p": float(row["p"])}
    else:
        for row in read_csv(path / "summary.csv"):
            out[(int(row["seed"]), float(row["beta"]))] = {m: float(row[m]) for m in SERVE_METRICS}
    return out


def sign_test(deltas) -> float:
    """Two-sided sign test p-value; ties are dropped."""
    d = np.asarray(deltas, dtype=float)
    pos, neg = int((d > 0).sum()), int((d < 0).sum())
    if pos + neg == 0:
        return 1.0
    return float(binomtest(pos, pos + neg, 0.5).pvalue)


COMPARE_FIELDS = ("run", "baseline", "metric", "n_pairs", "mean_baseline", "mean_run", "mean_delta", "n_pos", "n_neg", "sign_p")


def compare_runs(dirs, out: Path, plots: bool = True) -> list[dict]:
    """Paired deltas of every run against the first one."""
    if len(dirs) < 2:
        raise IncompatibleRuns("need at least two run directories")
    runs = [load_run(d) for d in dirs]
    check_compatible([r["config"] for r in runs], [r["command"] for r in runs])
    out.mkdir(parents=True, exist_ok=True)
    base = runs[0]
    metrics = TUNE_METRICS if base["command"] == "tune" else SERVE_METRICS
    rows = []
    for run in runs[1:]:
        keys = sorted(set(base["metrics"]) & set(run["metrics"]))
        if not keys:
            raise IncompatibleRuns(f"{run['path']} shares no seeds with {base['path']}")
        for m in metrics:
            a = np.array([base["metrics"][k][m] for k in keys])
            b = np.array([run["metrics"][k][m] for k in keys])
            d = b - a
            rows.append({
                "run": str(run["path"]), "baseline": str(base["path"]), "metric": m, "n_pairs": len(keys),
                "mean_baseline": float(a.mean()), "mean_run": float(b.mean()), "mean_delta": float(d.mean()),
                "n_pos": int((d > 0).sum()), "n_neg": int((d < 0).sum()), "sign_p": sign_test(d),
            })
    write_csv(out / "compare.csv", COMPARE_FIELDS, rows)
    _write_markdown(out / "report.md", runs, rows)
    if plots:
        if base["command"] == "tune":
            _plot_best_curves(out, runs)
        else:
            _plot_series(out, runs)
    return rows


def _write_markdown(path: Path, runs, rows) -> None:
    lines = ["# Run comparison", "", f"Baseline: `{runs[0]['path']}`", ""]
    for i, r in enumerate(runs):
        lines.append(f"- run {i}: `{r['path']}` ({r['command']})")
    lines += ["", "| run | metric | pairs | baseline | run | mean delta | + | - | sign p |",
              "|---|---|---|---|---|---|---|---|---|"]
    for row in rows:
        lines.append(
            f"| `{Path(row['run']).name}` | {row['metric']} | {row['n_pairs']} | {row['mean_baseline']:.4f} | "
            f"{row['mean_run']:.4f} | {row['mean_delta']:+.4f} | {row['n_pos']} | {row['n_neg']} | {row['sign_p']:.3g} |"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _mean_best_curve(path: Path, grid: np.ndarray) -> np.ndarray:
    groups = defaultdict(list)
    for row in read_csv(path / "progress.csv"):
        groups[(row["seed"], row["workers"])].append((float(row["time"]), float(row["best_p"])))
    curves = []
    for pts in groups.values():
        t, p = map(np.array, zip(*pts))
        idx = np.searchsorted(t, grid, side="right") - 1
        curves.append(np.where(idx >= 0, p[np.maximum(idx, 0)], np.nan))
    if not curves:
        return np.full(len(grid), np.nan)
    with warnings.catch_warnings():
        # before the first report of every seed the column is all NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(np.array(curves), axis=0)


def _plot_best_curves(out: Path, runs) -> None:
    t_max = 0.0
    for r in runs:
        rows = read_csv(r["path"] / "progress.csv")
        if rows:
            t_max = max(t_max, max(float(x["time"]) for x in rows))
    grid = np.linspace(0, t_max or 1.0, 200)
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        ax.plot(grid, _mean_best_curve(r["path"], grid), label=r["path"].name)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("mean best performance")
    ax.legend(fontsize=7)
    _save(fig, out / "best_p_compare.png")


def _plot_series(out: Path, runs) -> None:
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for r in runs:
        files = sorted(r["path"].glob("episode_*.csv"))
        if not files:
            continue
        data = [read_csv(f) for f in files]
        n = min(len(d) for d in data)
        t = np.array([float(x["t"]) for x in data[0][:n]])
        acc = np.array([[float(x["mean_accuracy"]) if x["mean_accuracy"] else np.nan for x in d[:n]] for d in data])
        over = np.array([[float(x["overdue"]) for x in d[:n]] for d in data])
        dt = t[1] - t[0] if n > 1 else 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            axes[0].plot(t, np.nanmean(acc, 0), lw=0.8, label=r["path"].name)
        axes[1].plot(t, over.mean(0) / dt, lw=0.8, label=r["path"].name)
    axes[0].set_ylabel("accuracy")
    axes[1].set_ylabel("overdue / s")
    axes[1].set_xlabel("time (s)")
    axes[0].legend(fontsize=7)
    _save(fig, out / "timeseries_compare.png")
