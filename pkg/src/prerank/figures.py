"""Report figures rendered straight to files.

Everything uses the Agg backend and writes PNGs with the date chunk
suppressed, so repeated renders of the same inputs produce identical
bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import prepare_output

_SAVE_KWARGS = {"format": "png", "dpi": 110, "metadata": {"Date": None}}


def _save(fig, path: str, force: bool) -> None:
    prepare_output(path, force)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def loss_curves(metrics: list[dict], path: str, force: bool = False) -> None:
    """Per-epoch loss components from training metrics records."""
    epochs = [rec["epoch"] for rec in metrics]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for key, label in (
        ("pair_loss", "pair"),
        ("point_loss", "point"),
        ("sparsity_loss", "gate mean"),
        ("total", "total"),
    ):
        ax.plot(epochs, [rec[key] for rec in metrics], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path, force)


def gate_histogram_figure(
    gate_values, path: str, force: bool = False
) -> None:
    """Distribution of effective gate values in [0, 1]."""
    values = np.asarray(gate_values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.hist(values, bins=np.linspace(0.0, 1.0, 21), edgecolor="black")
    ax.set_xlabel("gate value")
    ax.set_ylabel("count")
    ax.set_title(f"polarization gates (n={len(values)})")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path, force)


def recall_bars(
    rows: list[tuple[str, dict[str, float]]],
    n: int,
    path: str,
    force: bool = False,
) -> None:
    """Grouped per-slice recall bars, one group per model label.

    ``rows`` holds (model label, slice -> recall value).
    """
    if not rows:
        return
    slices = list(rows[0][1].keys())
    width = 0.8 / len(rows)
    x = np.arange(len(slices))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for i, (label, per_slice) in enumerate(rows):
        vals = [per_slice[s] for s in slices]
        ax.bar(x + i * width, vals, width=width, label=label)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(slices)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel(f"recall@{n}")
    ax.set_title("recall by corpus slice")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path, force)
