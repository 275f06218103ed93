"""Figures written next to the delimited report files (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
# fixed metadata keeps the files stable between identical runs
PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def knn_curves(rows: Sequence[Mapping], path: str | Path, title: str = "") -> Path:
    """Mean average K-NN distance against K, one panel per modality, one line per (corpus, n).

    ``rows`` carry ``modality``, ``n``, ``K``, ``mean_avg_dist`` and optionally ``corpus``.
    """
    modalities = sorted({r["modality"] for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(modalities), squeeze=False, figsize=(4.0 * len(modalities), 3.4))
        for ax, mod in zip(axes[0], modalities):
            sub = [r for r in rows if r["modality"] == mod]
            keys = sorted({(r.get("corpus", ""), r["n"]) for r in sub})
            for corpus, n in keys:
                pts = sorted((r["K"], r["mean_avg_dist"]) for r in sub if r.get("corpus", "") == corpus and r["n"] == n)
                label = f"{corpus} n={n}" if corpus else f"n={n}"
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=label)
            ax.set_xlabel("K")
            ax.set_ylabel("mean average distance")
            ax.set_title(mod)
            ax.legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def metric_bars(table: Sequence[Mapping], metric: str, path: str | Path, label_key: str = "config",
                errors: str | None = None) -> Path:
    """Horizontal bars of one metric per configuration (e.g. the ablation grid)."""
    labels = [str(r[label_key]) for r in table]
    values = np.array([float(r[metric]) for r in table])
    err = None if errors is None else np.array([float(r.get(errors, 0.0)) for r in table])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.35 * len(labels) + 1.2))
        y = np.arange(len(labels))
        ax.barh(y, values, xerr=err, color="#4c72b0", alpha=0.85)
        ax.set_yticks(y)
        ax.set_yticklabels(labels)
        ax.invert_yaxis()
        ax.set_xlabel(metric)
        lo = values.min() - (0.05 if metric != "mrr" else 0.01)
        ax.set_xlim(max(0.0, lo), values.max() * 1.02 + 1e-9)
        for yi, v in zip(y, values):
            ax.text(v, yi, f" {v:.4f}", va="center", fontsize=7)
        return _save(fig, path)


def image_weight_histogram(weights: np.ndarray, placeholder: np.ndarray | None, path: str | Path,
                           bound: float = 1.0) -> Path:
    """Distribution of the reported per-sample image weight, split by placeholder flag when known."""
    weights = np.asarray(weights, dtype=float)
    bins = np.linspace(0.0, bound, 31)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if placeholder is None:
            ax.hist(weights, bins=bins, color="#4c72b0", alpha=0.8)
        else:
            flag = np.asarray(placeholder, dtype=bool)
            ax.hist(weights[~flag], bins=bins, alpha=0.7, label="informative image")
            ax.hist(weights[flag], bins=bins, alpha=0.7, label="placeholder image")
            ax.legend(frameon=False)
        ax.set_xlabel("image weight")
        ax.set_ylabel("questions")
        return _save(fig, path)


def training_curves(log_lines: Sequence[Mapping], path: str | Path) -> Path:
    """Validation metric per epoch for every (stage, task) in a run log."""
    keys = sorted({(r["stage"], r["task"]) for r in log_lines})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for stage, task in keys:
            pts = [(r["epoch"], r["valid_metric"]) for r in log_lines if r["stage"] == stage and r["task"] == task]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"stage {stage} {task}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation metric")
        ax.legend(frameon=False)
        return _save(fig, path)
