"""Report figures rendered next to the delimited score outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalharness import SCORE_FIELDS, aggregate_scores

_CLASS_LABELS = {
    "dsc_lumen": "Lumen",
    "dsc_normal_wall": "Normal wall",
    "dsc_diseased_wall": "Diseased wall",
    "dsc_average": "Average",
}


def render_dsc_by_class(scores_by_model, path) -> Path:
    """Grouped bars: aggregate DSC per class for every model."""
    path = Path(path)
    models = sorted(scores_by_model)
    columns = SCORE_FIELDS[2:]
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(columns))
    for i, model in enumerate(models):
        agg = aggregate_scores(scores_by_model[model])
        vals = [agg[c] if agg[c] is not None else 0.0 for c in columns]
        ax.bar(x + (i - (len(models) - 1) / 2) * width, vals, width, label=model)
    ax.set_xticks(x)
    ax.set_xticklabels([_CLASS_LABELS[c] for c in columns])
    ax.set_ylabel("DSC")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_dsc_per_case(scores_by_model, path) -> Path:
    """Per-case average DSC, one marker series per model."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for model in sorted(scores_by_model):
        scores = sorted(scores_by_model[model], key=lambda s: s.case_id)
        ids = [s.case_id for s in scores]
        vals = [s.dsc_average if s.dsc_average is not None else np.nan for s in scores]
        ax.plot(ids, vals, marker="o", linestyle="-", label=model)
    ax.set_ylabel("Average DSC")
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", rotation=45)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_curves(loss_histories: dict[str, list[float]], path) -> Path:
    """Mean training loss per epoch for each trained model."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(loss_histories):
        history = loss_histories[name]
        ax.plot(range(len(history)), history, label=name)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Mean training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
