"""Matplotlib renderers for run artifacts (headless, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KW = {"dpi": 110, "bbox_inches": "tight",
            "metadata": {"Software": None}}


def loss_curves(epoch_losses: list[dict], path) -> None:
    """Per-epoch loss components from a TrainReport."""
    epochs = [e["epoch"] for e in epoch_losses]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "benchmark", "sake"):
        if all(key in e for e in epoch_losses):
            ax.plot(epochs, [e[key] for e in epoch_losses], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def per_class_ap_bars(per_class_ap: dict[int, float], path,
                      class_nodes: dict[int, str] | None = None) -> None:
    classes = sorted(per_class_ap)
    names = [class_nodes.get(c, str(c)) if class_nodes else str(c)
             for c in classes]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(classes)), 3.5))
    ax.bar(range(len(classes)), [per_class_ap[c] for c in classes])
    ax.set_xticks(range(len(classes)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    ax.grid(True, axis="y", alpha=0.3)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def tercile_bars(analysis: dict, path) -> None:
    """Group means from an improvement-tercile analysis."""
    groups = analysis["groups"]
    names = [g["group"] for g in groups]
    xs = range(len(groups))
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    panels = [("mean_delta", "mAP improvement"),
              ("mean_teacher_confidence", "teacher confidence"),
              ("mean_lch_to_nearest_original", "LCh to nearest original")]
    for ax, (key, label) in zip(axes, panels):
        ax.bar(xs, [g[key] for g in groups])
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names)
        ax.set_title(label, fontsize=9)
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def sweep_curve(values: list[float], scores: list[float], param: str,
                path, ylabel: str = "mAP@all") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, scores, marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
