"""Figure and plot-series writers for experiment outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}
PALETTE = ["#1b6ca8", "#d1495b", "#edae49", "#66a182", "#6b4c9a", "#2e4057"]


def write_series(path: str | Path, x, y, err=None, header: str = "x y err") -> Path:
    """Three whitespace-separated columns; err defaults to zero."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    err = np.zeros_like(y) if err is None else np.asarray(err, dtype=float)
    if not x.shape == y.shape == err.shape or x.ndim != 1:
        raise ValueError("series columns must be equal-length vectors")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([x, y, err]), fmt="%.10g", header=header)
    return path


def read_series(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path))


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def line_plot(path, curves: dict[str, tuple], xlabel: str, ylabel: str,
              logx: bool = False, hline: float | None = None) -> Path:
    """curves maps label -> (x, y, err); err may be None."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for color, (label, (x, y, err)) in zip(PALETTE * 4, curves.items()):
            x, y = np.asarray(x, float), np.asarray(y, float)
            ax.plot(x, y, color=color, label=label, marker="o" if len(x) < 12 else None, ms=3)
            if err is not None:
                err = np.asarray(err, float)
                ax.fill_between(x, y - err, y + err, color=color, alpha=0.2, lw=0)
        if hline is not None:
            ax.axhline(hline, color="0.5", ls="--", lw=0.8)
        if logx:
            ax.set_xscale("log", base=2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(curves) > 1:
            ax.legend()
        return _save(fig, path)


def sorted_score_plot(path, scores: dict[str, np.ndarray], threshold: float = 0.75) -> Path:
    """Per-level scores sorted ascending against the level percentile."""
    curves = {}
    for label, s in scores.items():
        s = np.sort(np.asarray(s, float).ravel())
        curves[label] = (100.0 * np.arange(1, len(s) + 1) / len(s), s, None)
    return line_plot(path, curves, "level percentile", "normalized return", hline=threshold)


def bar_plot(path, labels: Sequence[str], means, errs, ylabel: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.7 * len(labels) + 1.8, 2.8))
        ax.bar(range(len(labels)), means, yerr=errs, color=PALETTE[: len(labels)] or PALETTE,
               capsize=3, width=0.65)
        ax.set_xticks(range(len(labels)), labels, rotation=20)
        ax.set_ylabel(ylabel)
        ax.axhline(0.0, color="0.3", lw=0.6)
        return _save(fig, path)


def write_table(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """Tab-separated table with a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path
