"""CSV reports and matplotlib figures written next to them."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamps so reruns produce identical SVG bytes
_RC = {"svg.hashsalt": "rankdist", "svg.fonttype": "none", "font.size": 9}
_SVG_META = {"Date": None, "Creator": "rankdist"}


def write_csv(path, header, rows, summary=None) -> Path:
    """Header row, data rows, then an optional summary row."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row.get(k, "") for k in header] if isinstance(row, dict) else row)
        if summary is not None:
            w.writerow([summary.get(k, "") for k in header] if isinstance(summary, dict) else summary)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path):
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    kwargs = {"metadata": _SVG_META} if fmt == "svg" else {}
    fig.savefig(path, format=fmt, **kwargs)
    plt.close(fig)
    return path


def plot_rank_scatter(expected, predicted, path, title=None):
    """Expected vs predicted rank with the unit diagonal for reference."""
    expected = np.asarray(expected, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        lo = min(expected.min(), predicted.min()) - 0.5
        hi = max(expected.max(), predicted.max()) + 0.5
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--", zorder=1)
        ax.scatter(expected, predicted, s=28, color="C0", zorder=2)
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_xlabel("expected rank")
        ax.set_ylabel("predicted rank")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_score_vs_level(levels, scores, path, title=None):
    levels = np.asarray(levels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.scatter(levels, scores, s=6, alpha=0.5, color="C0", linewidths=0)
        ax.set_xlabel("distortion level")
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_history(history, path):
    batches = [h["batch"] for h in history]
    with plt.rc_context(_RC):
        fig, ax1 = plt.subplots(figsize=(4.5, 3.0))
        ax1.plot(batches, [h["train_loss"] for h in history], color="C0", marker=".")
        ax1.set_xlabel("batch")
        ax1.set_ylabel("train loss", color="C0")
        ax2 = ax1.twinx()
        ax2.plot(batches, [h["val_tp"] for h in history], color="C1", marker=".")
        ax2.set_ylabel("val TP %", color="C1")
        fig.tight_layout()
        return _save(fig, path)
