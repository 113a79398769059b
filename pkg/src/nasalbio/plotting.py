"""Report figures. Uses the Agg backend so it works headless."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "savefig.dpi": 120,
}

# keeps PNG bytes identical across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_cmc(curves: dict, path, max_rank: int | None = None) -> Path:
    """``curves`` maps a label to its CMC array (rate at rank 1, 2, ...)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, cmc in curves.items():
            cmc = np.asarray(cmc)[:max_rank]
            ax.plot(np.arange(1, len(cmc) + 1), 100 * cmc, marker=".", ms=3, label=label)
        ax.set_xlabel("rank")
        ax.set_ylabel("recognition rate (%)")
        ax.set_ylim(0, 101)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_roc(curves: dict, path) -> Path:
    """``curves`` maps a label to a (far, tar) pair; FAR on a log axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (far, tar) in curves.items():
            far = np.asarray(far)
            ok = far > 0
            ax.semilogx(far[ok], 100 * np.asarray(tar)[ok], label=label)
        ax.set_xlabel("false accept rate")
        ax.set_ylabel("true accept rate (%)")
        ax.set_ylim(0, 101)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_precision(thresholds, accuracy: np.ndarray, names, path) -> Path:
    """Precision curves: share of samples within each distance threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, acc in zip(names, accuracy):
            ax.plot(thresholds, 100 * np.asarray(acc), label=name)
        ax.set_xlabel("threshold (mm)")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 101)
        ax.legend(frameon=False, loc="lower right", ncol=2)
        return _save(fig, path)


def plot_gallery_size(sizes, mean_r1, std_r1, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(sizes, 100 * np.asarray(mean_r1), yerr=100 * np.asarray(std_r1),
                    marker="o", capsize=3)
        ax.set_xlabel("gallery samples per subject")
        ax.set_ylabel("rank-one rate (%)")
        ax.set_xticks(list(sizes))
        return _save(fig, path)


def plot_history(history, path) -> Path:
    h = np.asarray(history, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(h[:, 0], 100 * h[:, 1], label="best")
        ax.plot(h[:, 0], 100 * h[:, 2], label="mean")
        ax.set_xlabel("generation")
        ax.set_ylabel("rank-one rate (%)")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)
