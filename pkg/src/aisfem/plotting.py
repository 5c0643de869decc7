"""SVG figures for the experiment harness (matplotlib, non-interactive)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["loglog", "lines", "save"]

_RC = {
    "svg.hashsalt": "aisfem",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def loglog(series, path, xlabel, ylabel, title="", slopes=()):
    """Log-log plot of named ``(x, y)`` series with optional reference slopes.

    ``slopes`` is a sequence of exponents; each is drawn as a dashed line
    through the last point of the first series.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for name, (x, y) in series.items():
            x, y = np.asarray(x, float), np.asarray(y, float)
            ok = (x > 0) & (y > 0) & np.isfinite(y)
            ax.loglog(x[ok], y[ok], marker="o", ms=2.5, lw=1, label=name)
        if slopes and series:
            x, y = (np.asarray(a, float) for a in next(iter(series.values())))
            ok = (x > 0) & (y > 0)
            if ok.sum() >= 2:
                x, y = x[ok], y[ok]
                xs = np.array([x[0], x[-1]])
                for s in slopes:
                    ax.loglog(xs, y[-1] * 1.5 * (xs / x[-1]) ** s, "k--", lw=0.8, label=f"slope {s:g}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        save(fig, path)


def lines(series, path, xlabel, ylabel, title="", logy=False, hline=None):
    """Plain line plot of named ``(x, y)`` series."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for name, (x, y) in series.items():
            ax.plot(x, y, marker="o", ms=2.5, lw=1, label=name)
        if hline is not None:
            ax.axhline(hline, color="k", ls=":", lw=0.8)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        save(fig, path)
