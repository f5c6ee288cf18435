"""Matplotlib figure rendering for reports and heatmaps (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import DIRECTIONS, RECALL_KS, STAGES  # noqa: E402

__all__ = ["render_training_curves", "render_recall_bars", "render_heatmap"]

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None, "Date": None}}


def render_training_curves(history: list[dict], path: str) -> str:
    epochs = [rec["epoch"] for rec in history]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("loss_total", "loss_asr", "loss_mae", "loss_nll"):
        values = [rec.get(key) for rec in history]
        if any(v is not None for v in values):
            ax_loss.plot(epochs, [v if v is not None else float("nan") for v in values],
                         label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_metric.plot(epochs, [rec.get("wer") for rec in history], label="held-out WER")
    ax_metric.plot(epochs, [rec.get("r_at_1") for rec in history], label="held-out R@1")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylim(0, 1.05)
    ax_metric.legend(fontsize=7)
    fig.suptitle(history[0].get("stage", ""))
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def render_recall_bars(retrieval: dict[str, dict], path: str) -> str:
    fig, axes = plt.subplots(1, len(DIRECTIONS), figsize=(9, 3.2), sharey=True)
    stages = [s for s in STAGES if retrieval.get(s)]
    for ax, direction in zip(axes, DIRECTIONS):
        width = 0.8 / max(len(RECALL_KS), 1)
        for j, k in enumerate(RECALL_KS):
            xs = [i + j * width for i in range(len(stages))]
            ys = [retrieval[s].get((direction, k), 0.0) or 0.0 for s in stages]
            ax.bar(xs, ys, width=width, label=f"R@{k}")
        ax.set_xticks([i + 0.4 for i in range(len(stages))])
        ax.set_xticklabels(stages, rotation=20, fontsize=7)
        ax.set_title(direction)
        ax.set_ylim(0, 1.05)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def render_heatmap(matrix, token_labels, path: str) -> str:
    fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * len(token_labels)),
                                    max(3.0, 0.02 * matrix.shape[0])))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(len(token_labels)))
    ax.set_xticklabels(token_labels, rotation=45, fontsize=7)
    ax.set_ylabel("frame")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
