"""Plot emission: loss curves, metric bars, sample grids (headless Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(history, path) -> None:
    """history: rows of (step, term, value); one curve per term.

    An empty history produces a single empty-axes figure rather than an error.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    terms = {}
    for step, term, value in history:
        terms.setdefault(term, ([], []))
        terms[term][0].append(step)
        terms[term][1].append(value)
    for term, (xs, ys) in sorted(terms.items()):
        ax.plot(xs, ys, label=term)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if terms:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metric_bars(report, path, metric: str = "ssim") -> None:
    """One bar per report row for the chosen metric."""
    rows = report.per_sample if hasattr(report, "per_sample") else report
    fig, ax = plt.subplots(figsize=(6, 4))
    idx = [r["index"] for r in rows]
    vals = [r[metric] for r in rows]
    ax.bar(range(len(vals)), vals)
    ax.set_xticks(range(len(vals)), [str(i) for i in idx])
    ax.set_xlabel("sample")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sample_grid(rows, path) -> None:
    """rows: list of lists of (title, image HxW[x3] in [0,1])."""
    n_rows = max(len(rows), 1)
    n_cols = max((len(r) for r in rows), default=1)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(2.2 * n_cols, 2.2 * n_rows),
                             squeeze=False)
    for r in range(n_rows):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.set_axis_off()
            if r < len(rows) and c < len(rows[r]):
                title, img = rows[r][c]
                img = np.asarray(img)
                ax.imshow(np.clip(img, 0, 1),
                          cmap="gray" if img.ndim == 2 else None,
                          vmin=0, vmax=1)
                ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
