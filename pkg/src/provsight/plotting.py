"""Static figures rendered from run outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc(reports: Sequence[EvalReport], path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for r in reports:
        if r.roc:
            xs, ys = zip(*r.roc)
            ax.step(xs, ys, where="post", label=f"{r.method} (AUC {r.auc:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", c="grey", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7, loc="lower right")
    return _save(fig, path)


def plot_fpr_series(day_rows: Sequence[dict], path: str) -> str:
    days = [r["day"] for r in day_rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(days, [r["fpr"] for r in day_rows], marker="o", label="detector")
    if day_rows and "fpr_reduced" in day_rows[0]:
        ax.plot(days, [r["fpr_reduced"] for r in day_rows], marker="s", label="after reduction")
    ax.set_ylabel("FPR")
    ax.tick_params(axis="x", rotation=45, labelsize=7)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_unknown_cdf(cdf: Sequence[tuple[float, float]], path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if cdf:
        xs, ys = zip(*cdf)
        ax.step(xs, ys, where="post")
    ax.set_xlabel("share of unseen objects per process")
    ax.set_ylabel("CDF")
    return _save(fig, path)


def plot_distance_auc(points: Sequence, path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter([p.ratio.ratio for p in points], [p.auc for p in points], s=18)
    ax.set_xscale("log")
    ax.set_xlabel("distance ratio (malicious / benign)")
    ax.set_ylabel("AUC")
    return _save(fig, path)


def plot_idmap(rows: Sequence[dict], path: str) -> str:
    names = [r["strategy"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.2))
    a1.bar(names, [r["auc"] or 0.0 for r in rows])
    a1.set_ylim(0, 1)
    a1.set_ylabel("AUC")
    a2.bar(names, [r["node_count"] for r in rows], color="tab:orange")
    a2.set_ylabel("test nodes")
    return _save(fig, path)


def render_run(directory: str, report: EvalReport, reduced: EvalReport | None, day_rows: Sequence[dict]) -> list[str]:
    out = [plot_roc([r for r in (report, reduced) if r is not None], os.path.join(directory, "roc.png"))]
    if day_rows:
        out.append(plot_fpr_series(day_rows, os.path.join(directory, "fpr_by_day.png")))
    return out
