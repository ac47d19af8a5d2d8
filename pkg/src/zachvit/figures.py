"""File-based figure rendering for the report paths.

Every command that emits a machine-readable report also drops a PNG
next to it: training writes a loss curve, sweeps a per-variant summary
chart, ranking a mean-rank chart and a critical-difference diagram.
All rendering targets the Agg backend so it works headless.
"""

from __future__ import annotations

from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curve(epoch_losses: Sequence[float], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if epoch_losses:
        ax.plot(range(1, len(epoch_losses) + 1), list(epoch_losses), marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_title(title or "training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_summary_chart(
    rows: Sequence[dict], labels: Dict[str, str], path, ylabel: str = "score"
) -> None:
    """Grouped bars of mean +/- std, one bar group per config.

    ``rows`` are summary dicts (config_id, dataset, metric, mean, std),
    already filtered to the metric the caller wants shown; ``labels``
    maps config ids to human-readable variant names.
    """
    picked = list(rows)
    datasets = sorted({r["dataset"] for r in picked})
    configs = sorted(
        {r["config_id"] for r in picked}, key=lambda c: labels.get(c, c)
    )
    width = 0.8 / max(len(datasets), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(configs)), 4.5))
    for d_i, dataset in enumerate(datasets):
        xs, means, stds = [], [], []
        for c_i, cid in enumerate(configs):
            match = [
                r for r in picked if r["config_id"] == cid and r["dataset"] == dataset
            ]
            if match:
                xs.append(c_i + d_i * width)
                means.append(match[0]["mean"])
                stds.append(match[0]["std"])
        ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=dataset)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(configs))])
    ax.set_xticklabels(
        [labels.get(c, c) for c in configs], rotation=30, ha="right", fontsize=8
    )
    ax.set_ylabel(ylabel)
    ax.set_title("sweep summary (mean +/- std over seeds)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mean_rank_chart(model_names: Sequence[str], mean_ranks, path) -> None:
    order = sorted(range(len(model_names)), key=lambda i: mean_ranks[i])
    names = [model_names[i] for i in order]
    values = [float(mean_ranks[i]) for i in order]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(names) + 1.5))
    ax.barh(range(len(names)), values, color="#4878d0")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=9)
    ax.invert_yaxis()
    ax.set_xlabel("mean rank (lower is better)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cd_diagram(
    model_names: Sequence[str],
    mean_ranks,
    cd: float,
    groups: Sequence[Sequence[int]],
    path,
    alpha: float = 0.05,
) -> None:
    """Classic critical-difference layout: a rank axis, one stem per model,
    and a thick bar under every group whose spread is within the CD."""
    k = len(model_names)
    order = sorted(range(k), key=lambda i: mean_ranks[i])
    lo = min(float(r) for r in mean_ranks)
    hi = max(float(r) for r in mean_ranks)
    pad = max(0.3, 0.05 * (hi - lo + 1))
    fig, ax = plt.subplots(figsize=(8, 0.45 * k + 2.2))
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(-0.6 * k - len(groups) * 0.4 - 1, 1.8)
    ax.axis("off")
    ax.plot([lo - pad, hi + pad], [0, 0], color="black", lw=1)
    for tick in range(int(lo), int(hi) + 2):
        if lo - pad <= tick <= hi + pad:
            ax.plot([tick, tick], [0, 0.12], color="black", lw=1)
            ax.text(tick, 0.25, str(tick), ha="center", fontsize=8)
    # CD ruler in the top-left corner
    ax.plot([lo - pad, lo - pad + cd], [1.3, 1.3], color="black", lw=2)
    ax.text(lo - pad + cd / 2, 1.45, f"CD = {cd:.3f} (alpha={alpha})", ha="center", fontsize=8)
    for slot, idx in enumerate(order):
        r = float(mean_ranks[idx])
        y = -0.55 * (slot + 1)
        ax.plot([r, r], [0, y], color="#555555", lw=0.9)
        ax.plot([r, lo - pad * 0.6], [y, y], color="#555555", lw=0.9)
        ax.text(
            lo - pad * 0.65, y, model_names[idx], ha="right", va="center", fontsize=8
        )
    base = -0.55 * (k + 1) - 0.3
    for g_i, group in enumerate(groups):
        if len(group) < 2:
            continue
        xs = [float(mean_ranks[i]) for i in group]
        y = base - 0.35 * g_i
        ax.plot([min(xs), max(xs)], [y, y], color="#c44e52", lw=3, solid_capstyle="round")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
