"""File-only figures for registration runs and sweeps (Agg backend, no display)."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_loss_history(history: list[dict], path, title: str | None = None) -> str:
    """Total loss and its terms per epoch, log scale, with the learning rate below."""
    epochs = np.array([h["epoch"] for h in history])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    for key, style in (("total", "-"), ("mcc", "--"), ("llr", ":"), ("match", "-.")):
        vals = np.array([h[key] for h in history], dtype=float)
        if np.any(vals > 0):
            ax.semilogy(epochs, np.where(vals > 0, vals, np.nan), style,
                        label="data" if key == "mcc" else key)
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    ax_lr.semilogy(epochs, [h["lr"] for h in history], color="k")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("epoch")
    return _save(fig, path)


def plot_error_histogram(errors: np.ndarray, thresholds, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(errors, bins=60, color="0.4")
    for t, name in zip(thresholds, ("strict", "relaxed", "outlier")):
        ax.axvline(t, ls="--", lw=1, label=f"{name} {t:g}")
    ax.set_xlabel("per-point error (normalized)")
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep(rows: list[dict], path, metric: str = "acc_r") -> str:
    """``metric`` against occlusion level, one line per loss/regularizer pair."""
    series = defaultdict(list)
    for r in rows:
        if r.get(metric) not in (None, ""):
            series[f"{r['loss']}+{r['reg']}"].append((float(r["occlusion"]), float(r[metric])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=label)
    ax.set_xlabel("occlusion fraction")
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    return _save(fig, path)
