"""Figures written next to the delimited reports (headless Agg backend)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(rows: Sequence, path) -> None:
    taus = [r.tau for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(taus, [r.f1_general for r in rows], marker="o", label="small model, General")
    ax.plot(taus, [r.f1_proprietary for r in rows], marker="s", label="small model, Proprietary")
    ax.plot(taus, [r.f1_all for r in rows], marker="^", linestyle="--", label="pipeline, all")
    ax.set_xlabel("routing threshold tau")
    ax.set_ylabel("F1 (%)")
    ax.set_ylim(0, 105)
    ax2 = ax.twinx()
    ax2.bar(taus, [100 * r.general_frac for r in rows], width=0.03, alpha=0.2, color="grey")
    ax2.set_ylabel("General share (%)")
    ax2.set_ylim(0, 100)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_route_scores(report, tau: float, path) -> None:
    scores = [r.score for r in report.rows if r.score >= -1.0]
    normal = [r.score for r in report.rows if r.truth == 0]
    anomalous = [r.score for r in report.rows if r.truth == 1]
    fig, ax = plt.subplots(figsize=(6, 4))
    if normal or anomalous:
        ax.hist([normal, anomalous], bins=40, stacked=True, label=["normal", "anomalous"])
        ax.legend(fontsize=8)
    else:
        ax.hist(scores, bins=40)
    ax.axvline(tau, color="k", linestyle=":")
    ax.set_xlabel("sequence similarity to source")
    ax.set_ylabel("sequences")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
