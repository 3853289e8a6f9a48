"""Figures for reports: loss curves, confusion matrices, efficiency bars.

Everything renders with the Agg backend straight to files, so no display is
needed.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .profiler import COLUMNS, EfficiencyRecord  # noqa: E402


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_loss_curves(log: List[dict], path, title: str = "training loss", window: int = 10,
                     components: bool = True) -> Path:
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(steps, [r["loss"] for r in log], color="0.75", lw=0.8, label="loss")
    ax.plot(steps, smooth([r["loss"] for r in log], window), color="k", lw=1.5, label=f"loss (avg {window})")
    if components and log:
        # per-layer entries (att.1, hid.2, ...) would swamp the legend
        keys = [k for k in log[0].get("components", {}) if "." not in k]
        for k in keys:
            ax.plot(steps, smooth([r["components"].get(k, np.nan) for r in log], window), lw=1.0, label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_confusion_matrix(matrix: np.ndarray, labels: Sequence[str], path, title: str = "confusion matrix",
                          normalize: bool = False) -> Path:
    """Rows are gold labels, columns predictions."""
    m = np.asarray(matrix, dtype=np.float64)
    shown = m / np.maximum(m.sum(axis=1, keepdims=True), 1) if normalize else m
    size = max(3.5, 0.45 * len(labels) + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(shown, cmap="Blues", vmin=0)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_title(title)
    if len(labels) <= 12:
        top = shown.max() if shown.size else 0
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                text = f"{shown[i, j]:.2f}" if normalize else str(int(m[i, j]))
                ax.text(j, i, text, ha="center", va="center", fontsize=7,
                        color="white" if shown[i, j] > top / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_efficiency(records: Sequence[EfficiencyRecord], path, title: Optional[str] = None) -> Path:
    """One bar panel per efficiency column; missing values are left blank."""
    present = [(key, label) for key, label in COLUMNS if any(getattr(r, key) is not None for r in records)]
    fig, axes = plt.subplots(1, len(present), figsize=(3.6 * len(present), 3.6), squeeze=False)
    names = [r.name for r in records]
    for ax, (key, label) in zip(axes[0], present):
        vals = [getattr(r, key) for r in records]
        heights = [0.0 if v is None else v for v in vals]
        bars = ax.bar(range(len(records)), heights, color="0.55")
        for bar, v in zip(bars, vals):
            if v is not None:
                ax.annotate(f"{v:.3g}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                            ha="center", va="bottom", fontsize=7)
        if key == "latency_ms":
            errs = [0.0 if r.latency_std is None else r.latency_std for r in records]
            ax.errorbar(range(len(records)), heights, yerr=errs, fmt="none", ecolor="k", lw=0.8)
        ax.set_xticks(range(len(records)), names, rotation=40, ha="right", fontsize=7)
        ax.set_title(label, fontsize=9)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # pin metadata so identical inputs give identical files
    with plt.rc_context({"svg.hashsalt": "clindistil"}):
        fig.savefig(path, dpi=120, metadata=_metadata(path))
    plt.close(fig)
    return path


def _metadata(path: Path) -> Dict[str, Optional[str]]:
    if path.suffix.lower() == ".png":
        return {"Software": None}
    if path.suffix.lower() in (".pdf", ".svg"):
        return {"Creator": None, "Date": None} if path.suffix.lower() == ".svg" else {"Creator": None, "CreationDate": None}
    return {}
