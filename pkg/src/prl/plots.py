"""Render experiment report rows as figures next to the CSV exports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["save_score_curves", "save_loss_curves", "render_report_figures"]


def _by_game(rows, value_key):
    series = {}
    for row in rows:
        value = row.get(value_key)
        if value is None:
            continue
        series.setdefault(row["game"], []).append((row["iteration"], value))
    for points in series.values():
        points.sort()
    return series


def save_score_curves(rows, path) -> None:
    """Per-game mean episode score against iteration (iteration 0 is the
    random-play baseline)."""
    series = _by_game(rows, "mean_score")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for game, points in sorted(series.items()):
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", label=game)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode score")
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curves(rows, path) -> None:
    series = _by_game(rows, "mean_loss")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for game, points in sorted(series.items()):
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", label=game)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean training loss")
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(rows, out_dir) -> list[str]:
    score_path = os.path.join(out_dir, "scores.png")
    loss_path = os.path.join(out_dir, "loss.png")
    save_score_curves(rows, score_path)
    save_loss_curves(rows, loss_path)
    return [score_path, loss_path]
