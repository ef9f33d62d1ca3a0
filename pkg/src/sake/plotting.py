"""Figures written next to the text reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_training_curve(history: list[dict], path, keys=("train_mse", "valid_mse"), title=None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [row["epoch"] for row in history]
        for key in keys:
            if history and key in history[0]:
                ax.plot(epochs, [row[key] for row in history], label=key.replace("_", " "))
        if all(row[k] > 0 for row in history for k in keys if k in row):
            ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_scaling(report: dict, path) -> None:
    edges, secs = report["edges"], report["seconds"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.loglog(edges, secs, "o-", label=f"measured (slope {report['exponent']:.2f})")
        ref = [secs[0] * e / edges[0] for e in edges]
        ax.loglog(edges, ref, "--", color="0.5", label="linear")
        ax.set_xlabel("number of edges")
        ax.set_ylabel("forward time (s)")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
