"""Render figures from a run's CSV outputs.

Consumes the delimited files a training run (or the analyze subcommand)
leaves behind and writes PNG figures next to them: learning curves, loss
traces, intention usage, continuity and the intention/action co-occurrence
table. Accepts either a single-seed run directory or a multi-seed root
containing ``seed_*/`` subdirectories, in which case curves are overlaid
and a mean trace is drawn.
"""

from __future__ import annotations

import glob
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .io_utils import read_csv_dicts  # noqa: E402


def _seed_dirs(run_dir: str) -> list[str]:
    if os.path.exists(os.path.join(run_dir, "training_log.csv")):
        return [run_dir]
    nested = sorted(glob.glob(os.path.join(run_dir, "seed_*")))
    return [d for d in nested if os.path.exists(os.path.join(d, "training_log.csv"))]


def _load_logs(run_dir: str):
    logs = []
    for d in _seed_dirs(run_dir):
        rows, _ = read_csv_dicts(os.path.join(d, "training_log.csv"))
        if rows:
            logs.append((os.path.basename(d) or "run", rows))
    return logs


def _series(rows, column):
    return (np.array([float(r["step"]) for r in rows]),
            np.array([float(r[column]) for r in rows]))


def _overlay(ax, logs, column, ylabel):
    curves = []
    for name, rows in logs:
        steps, values = _series(rows, column)
        ax.plot(steps, values, alpha=0.45, linewidth=1.0, label=name)
        curves.append((steps, values))
    if len(curves) > 1 and all(len(c[0]) == len(curves[0][0]) for c in curves):
        mean = np.mean([c[1] for c in curves], axis=0)
        ax.plot(curves[0][0], mean, color="black", linewidth=2.0, label="mean")
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(logs) > 1:
        ax.legend(fontsize=7)


def render_run_report(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every figure the run's files support; returns written paths."""
    out_dir = out_dir or os.path.join(run_dir, "figures")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    logs = _load_logs(run_dir)

    if logs:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        _overlay(axes[0], logs, "return_mean", "mean return per agent")
        _overlay(axes[1], logs, "success_rate", "success rate")
        fig.suptitle("Greedy evaluation during training")
        fig.tight_layout()
        path = os.path.join(out_dir, "returns.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        fig, axes = plt.subplots(2, 3, figsize=(13, 7))
        for ax, column in zip(axes.ravel(),
                              ("td_low", "td_high", "l_I", "l_A", "l_D", "total")):
            _overlay(ax, logs, column, column)
        fig.suptitle("Training losses")
        fig.tight_layout()
        path = os.path.join(out_dir, "losses.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        fig, axes = plt.subplots(1, 3, figsize=(13, 4))
        for ax, column, label in (
                (axes[0], "continuity_mean", "mean intention run length"),
                (axes[1], "tv_select_observer", "TV(selection, observer)"),
                (axes[2], "agreement", "member/commander agreement")):
            _overlay(ax, logs, column, label)
        fig.suptitle("Intention statistics during training")
        fig.tight_layout()
        path = os.path.join(out_dir, "intention_trends.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    analysis = _find_analysis_dir(run_dir)
    if analysis:
        written.extend(_render_analysis(analysis, out_dir))
    return written


def _find_analysis_dir(run_dir: str) -> str | None:
    for cand in (run_dir, os.path.join(run_dir, "analysis")):
        if os.path.exists(os.path.join(cand, "selection.csv")):
            return cand
    hits = sorted(glob.glob(os.path.join(run_dir, "**", "selection.csv"),
                            recursive=True))
    return os.path.dirname(hits[0]) if hits else None


def _render_analysis(analysis_dir: str, out_dir: str) -> list[str]:
    written = []
    selection, _ = read_csv_dicts(os.path.join(analysis_dir, "selection.csv"))
    observer, _ = read_csv_dicts(os.path.join(analysis_dir, "observer.csv"))
    z = np.array([int(r["z"]) for r in selection])
    sel = np.array([int(r["count"]) for r in selection], dtype=float)
    obs = np.array([int(r["count"]) for r in observer], dtype=float)
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.4
    ax.bar(z - width / 2, sel / max(sel.max(), 1), width, label="commander selection")
    ax.bar(z + width / 2, obs / max(obs.max(), 1), width,
           label="member observation")
    ax.set_xlabel("intention")
    ax.set_ylabel("count (max-normalized)")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "intention_usage.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    continuity, _ = read_csv_dicts(os.path.join(analysis_dir, "continuity.csv"))
    if continuity:
        lengths = [int(r["run_length"]) for r in continuity]
        counts = [int(r["count"]) for r in continuity]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(lengths, counts)
        ax.set_xlabel("consecutive steps holding one intention")
        ax.set_ylabel("runs")
        fig.tight_layout()
        path = os.path.join(out_dir, "continuity_hist.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    cooc_rows, _ = read_csv_dicts(os.path.join(analysis_dir, "cooccurrence.csv"))
    if cooc_rows:
        buckets = sorted({r["joint_action_bucket"] for r in cooc_rows})
        zs = sorted({int(r["z"]) for r in cooc_rows})
        table = np.zeros((len(buckets), len(zs)))
        for r in cooc_rows:
            table[buckets.index(r["joint_action_bucket"]), zs.index(int(r["z"]))] \
                = float(r["count"])
        fig, ax = plt.subplots(figsize=(8, 3))
        im = ax.imshow(table, aspect="auto", cmap="viridis")
        ax.set_yticks(range(len(buckets)), buckets)
        ax.set_xticks(range(len(zs)), zs)
        ax.set_xlabel("intention")
        fig.colorbar(im, ax=ax, label="count")
        fig.tight_layout()
        path = os.path.join(out_dir, "cooccurrence.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
