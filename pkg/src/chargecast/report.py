"""Figure rendering for run reports.

Every function writes one PNG next to the delimited outputs. matplotlib
is imported lazily with the Agg backend so headless runs and users who
never plot pay nothing.
"""

from __future__ import annotations

import math


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    _plt().close(fig)


def plot_loss_history(history, path) -> None:
    """Train/validation loss per epoch for one training phase."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.train_loss for h in history], marker="o",
            label="train")
    ax.plot(epochs, [h.val_loss for h in history], marker="s",
            label="validation")
    phase = history[0].phase if history else ""
    ax.set_xlabel("epoch")
    ax.set_ylabel("mse")
    ax.set_title(f"{phase} loss".strip())
    ax.legend()
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def plot_metric_bars(rows, path, units: str = "") -> None:
    """Grouped MAE/MSE bars; ``rows`` is (label, mae, mse) triples."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(rows) + 2.0), 3.6))
    idx = range(len(rows))
    width = 0.38
    ax.bar([i - width / 2 for i in idx], [r[1] for r in rows], width,
           label="mae")
    ax.bar([i + width / 2 for i in idx], [r[2] for r in rows], width,
           label="mse")
    ax.set_xticks(list(idx), [r[0] for r in rows], rotation=20, ha="right")
    ax.set_ylabel(f"error ({units})" if units else "error")
    ax.set_title("forecast error")
    ax.legend()
    _finish(fig, path)


def plot_forecast_overlay(samples, path) -> None:
    """Target vs forecast for up to four windows.

    ``samples`` is (station_id, target [H], prediction [H]) triples.
    """
    plt = _plt()
    picks = list(samples)[:4]
    if not picks:
        raise ValueError("no forecast samples to plot")
    n = len(picks)
    ncol = min(2, n)
    nrow = math.ceil(n / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(5.0 * ncol, 2.8 * nrow),
                             squeeze=False)
    for k, (sid, target, pred) in enumerate(picks):
        ax = axes[k // ncol][k % ncol]
        steps = range(1, len(target) + 1)
        ax.plot(steps, target, marker="o", label="actual")
        ax.plot(steps, pred, marker="x", label="forecast")
        ax.set_title(sid)
        ax.set_xlabel("horizon step")
        ax.grid(True, alpha=0.3)
    axes[0][0].set_ylabel("load (kWh)")
    axes[0][0].legend()
    for k in range(n, nrow * ncol):
        axes[k // ncol][k % ncol].axis("off")
    _finish(fig, path)


def plot_ablation(rows, path) -> None:
    """Per-variant MSE bars with one-sigma whiskers across seeds."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(max(4.0, 1.3 * len(rows) + 2.0), 3.6))
    idx = range(len(rows))
    ax.bar(list(idx), [r.mse_mean for r in rows],
           yerr=[r.mse_std for r in rows], capsize=4)
    ax.set_xticks(list(idx), [r.variant for r in rows])
    ax.set_ylabel("mse (standardized)")
    ax.set_title(f"ablations over {rows[0].n_seeds if rows else 0} seed(s)")
    _finish(fig, path)


def plot_sweep(cells, path) -> None:
    """Mean MAE/MSE against the swept value; skipped cells are dropped."""
    plt = _plt()
    done = [c for c in cells if not c.note]
    if not done:
        raise ValueError("sweep produced no completed cells to plot")
    values = sorted({c.value for c in done})
    mae_means, mse_means = [], []
    for v in values:
        group = [c for c in done if c.value == v]
        mae_means.append(sum(c.mae for c in group) / len(group))
        mse_means.append(sum(c.mse for c in group) / len(group))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(values, mae_means, marker="o", label="mae")
    ax.plot(values, mse_means, marker="s", label="mse")
    ax.set_xlabel(done[0].param)
    ax.set_ylabel("mean error (standardized)")
    ax.set_title(f"sweep over {done[0].param}")
    ax.set_xticks(values)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _finish(fig, path)
