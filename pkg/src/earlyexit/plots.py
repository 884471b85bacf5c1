"""Figures for threshold sweeps, rendered with matplotlib's file backend."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .screening import threshold_curve  # noqa: E402


def plot_sweep(report, path):
    """Accuracy against MAC speedup for every sweep point.

    The knee is drawn as a star and the baseline network as a diamond at 1x.
    For single-threshold sweeps a second panel shows accuracy and the exit-1
    share against the entropy threshold.
    """
    single = report.num_thresholds == 1
    fig, axes = plt.subplots(1, 2 if single else 1, figsize=(11 if single else 6, 4.5), squeeze=False)
    ax = axes[0, 0]
    ax.scatter([p.speedup for p in report.points], [100 * p.accuracy for p in report.points],
               s=14, color="tab:blue", alpha=0.6, label="threshold settings")
    ax.scatter([1.0], [100 * report.baseline_accuracy], marker="D", s=60, color="tab:red", label="baseline")
    knee = report.knee_point
    if knee is not None:
        ax.scatter([knee.speedup], [100 * knee.accuracy], marker="*", s=220, color="tab:green",
                   edgecolor="k", zorder=3, label="knee")
    ax.set_xlabel("speedup (baseline MACs / expected MACs)")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")

    if single:
        t, acc, frac = threshold_curve(report)
        keep = t > 0  # log axis
        ax2 = axes[0, 1]
        ax2.plot(t[keep], 100 * acc[keep], "o-", ms=3, color="tab:blue", label="accuracy")
        ax2.set_xscale("log")
        ax2.set_xlabel("entropy threshold (nats)")
        ax2.set_ylabel("accuracy (%)")
        ax2.grid(alpha=0.3)
        twin = ax2.twinx()
        twin.plot(t[keep], 100 * frac[keep], "s--", ms=3, color="tab:orange", label="exit 1 share")
        twin.set_ylabel("exit 1 share (%)")
        lines = ax2.get_lines() + twin.get_lines()
        ax2.legend(lines, [ln.get_label() for ln in lines], loc="lower left")

    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def figure_path(csv_path):
    return os.path.splitext(csv_path)[0] + ".png"
