"""Matplotlib figures for the report command. All functions write a PNG and return its path."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_NAMES = ("background", "circle", "square", "triangle", "h-stripe", "v-stripe")
CLASS_COLORS = ("#7f7f7f", "#d62728", "#2ca02c", "#1f77b4", "#e6c200", "#c03cc0")


def _class_labels(k: int):
    names = list(CLASS_NAMES[:k]) + [f"class {i}" for i in range(len(CLASS_NAMES), k)]
    colors = [CLASS_COLORS[i] if i < len(CLASS_COLORS) else plt.cm.tab20(i % 20) for i in range(k)]
    return names, colors


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_distributions(distributions: dict, path) -> Path:
    """One pie chart per named class distribution, side by side."""
    n = max(len(distributions), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4), squeeze=False)
    for ax, (name, w) in zip(axes[0], distributions.items()):
        w = np.asarray(w, dtype=float)
        names, colors = _class_labels(len(w))
        keep = w > 0
        ax.pie(w[keep], colors=[c for c, k in zip(colors, keep) if k], startangle=90, counterclock=False,
               wedgeprops={"linewidth": 0.5, "edgecolor": "white"})
        entropy = float(-(w[keep] * np.log(w[keep])).sum()) + 0.0  # avoid printing -0.000
        ax.set_title(f"{name}\nH = {entropy:.3f}", fontsize=9)
    if distributions:
        names, colors = _class_labels(len(next(iter(distributions.values()))))
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in colors]
        fig.legend(handles, names, loc="lower center", ncol=len(names), fontsize=8, frameon=False)
    return _save(fig, path)


def plot_mixing_curve(summary_rows, path, n_batch: int | None = None) -> Path:
    """Student mean IoU against the generated share beta / n_batch."""
    rows = sorted(summary_rows, key=lambda r: r["beta"])
    beta = np.array([r["beta"] for r in rows], dtype=float)
    total = n_batch or (rows[0]["alpha"] + rows[0]["beta"] if rows else 1)
    miou = np.array([r["mean_iou"] for r in rows], dtype=float)
    std = np.array([r.get("mean_iou_std", 0.0) for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(beta / total, miou, yerr=std, marker="o", capsize=3)
    ax.set_xticks(beta / total, [f"{int(r['alpha'])}:{int(r['beta'])}" for r in rows])
    ax.set_xlabel("proxy : generated images per batch")
    ax.set_ylabel("student mean IoU")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_lambda_grid(summary_rows, path) -> Path:
    """Grouped bars: one group per (lambda_e, lambda_d), one bar per diversity variant."""
    pairs, variants = [], []
    for r in summary_rows:
        if (r["lambda_e"], r["lambda_d"]) not in pairs:
            pairs.append((r["lambda_e"], r["lambda_d"]))
        if r["variant"] not in variants:
            variants.append(r["variant"])
    values = {(r["lambda_e"], r["lambda_d"], r["variant"]): (r["mean_iou"], r.get("mean_iou_std", 0.0))
              for r in summary_rows}
    fig, ax = plt.subplots(figsize=(1.3 * max(len(pairs), 1) + 1.5, 3.2))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(pairs))
    for i, variant in enumerate(variants):
        got = [values.get((le, ld, variant), (np.nan, 0.0)) for le, ld in pairs]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, [g[0] for g in got], width,
               yerr=[g[1] for g in got], capsize=2, label=variant)
    ax.set_xticks(x, [f"λe={le:g}\nλd={ld:g}" for le, ld in pairs], fontsize=8)
    ax.set_ylabel("student mean IoU")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_loss_curves(epochs: list[dict], path, title: str = "") -> Path:
    """Per-epoch losses from a JSONL run log (already parsed)."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = sorted({k for e in epochs for k in e["losses"]})
    for name in names:
        ax.plot([e["epoch"] for e in epochs], [e["losses"].get(name, np.nan) for e in epochs], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title, fontsize=9)
    if names:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)
