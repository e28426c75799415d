"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[dict], path, keys=("cycle", "gan_g", "dis", "idt")) -> Path:
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8))
    steps = [r["step"] for r in rows]
    for ax, key in zip(axes, keys):
        ax.plot(steps, [r[key] for r in rows], lw=1.2)
        ax.set_title(key)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_tokenizer_curve(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    steps = [r["step"] for r in rows]
    ax.plot(steps, [r["l1"] for r in rows], label="L1")
    ax.plot(steps, [r["vq"] for r in rows], label="codebook + commit")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path, title: str) -> Path:
    metrics = ("fid_proxy", "struct_dist", "domain_acc")
    labels = [str(r["setting"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for ax, m in zip(axes, metrics):
        ax.bar(range(len(rows)), [r[m] for r in rows], color="#4c72b0")
        ax.set_xticks(range(len(rows)), labels, rotation=40, ha="right", fontsize=8)
        ax.set_title(m)
    fig.suptitle(title)
    return _save(fig, path)


def plot_bench(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    names = [f"{r.mode}\n({r.forwards} fwd)" for r in reports]
    ax.bar(names, [r.mean_s * 1000 for r in reports], yerr=[r.std_s * 1000 for r in reports],
           capsize=4, color=["#dd8452", "#55a868"][: len(reports)])
    ax.set_ylabel("ms per image batch")
    return _save(fig, path)


def image_grid(rows: Sequence[torch.Tensor], path, row_labels: Sequence[str] | None = None) -> Path:
    """Each entry of ``rows`` is an (N, 3, H, W) batch in [0, 1] shown as one row."""
    n = max(len(r) for r in rows)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.1 * n, 1.15 * len(rows)), squeeze=False)
    for i, batch in enumerate(rows):
        for j in range(n):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(batch):
                ax.imshow(batch[j].detach().clamp(0, 1).permute(1, 2, 0).numpy(), interpolation="nearest")
        if row_labels:
            axes[i][0].set_title(row_labels[i], fontsize=7, loc="left")
    return _save(fig, path)
