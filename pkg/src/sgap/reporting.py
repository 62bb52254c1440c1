"""Plots of a sweep: privacy metric and proxy accuracy against lambda."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import aggregate, read_sweep_csv  # noqa: E402

_LABELS = {
    "mi_estimate": "empirical mutual information [nats]",
    "misclassification_rate": "identity misclassification rate",
}


def _plot_one(rows, metric, path):
    privacy = aggregate(rows, metric)
    acc = aggregate(rows, "accuracy_mean")
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    if privacy:
        lam, mean, std = zip(*privacy)
        ax.errorbar(lam, mean, yerr=std, marker="o", color="tab:red", label=_LABELS[metric], capsize=3)
    ax.set_xlabel("distortion penalty lambda")
    ax.set_ylabel(_LABELS[metric], color="tab:red")
    ax.invert_xaxis()  # strong penalty (little privacy) on the left
    ax2 = ax.twinx()
    if acc:
        lam, mean, std = zip(*acc)
        ax2.errorbar(lam, mean, yerr=std, marker="s", color="tab:blue", label="proxy accuracy", capsize=3)
    ax2.set_ylabel("proxy task accuracy", color="tab:blue")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    # no timestamp / version in the PNG so output is a pure function of the CSV
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_sweep(csv_path, out_dir, privacy_metric="misclassification_rate"):
    """Write both privacy-vs-lambda figures; ``privacy_metric`` one is listed first."""
    rows = read_sweep_csv(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = [privacy_metric] + [m for m in _LABELS if m != privacy_metric]
    return [_plot_one(rows, m, out_dir / f"{m}_vs_lambda.png") for m in metrics]
