"""Report figures: metric-vs-time curves and a convergence-time bar chart.

Rendering uses the Agg backend and strips the PNG Software tag so that
identical inputs produce identical bytes.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

if TYPE_CHECKING:  # avoids an import cycle with the harness
    from sflsim.experiment import CellResult

__all__ = ["render_figures"]

_DPI = 120
_PNG_META = {"Software": None}  # keep output bytes version-independent


def _label(cell: "CellResult") -> str:
    sched = cell.config.scheduler
    return f"{cell.config.scheme}/{sched}" if sched else cell.config.scheme


def _save(fig, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)


def _metric_vs_time(
    cells: Sequence["CellResult"], metric: str, ylabel: str, path: Path
) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for cell in cells:
        logs = cell.result.round_logs
        ax.plot(
            [log.cum_time_s for log in logs],
            [getattr(log, metric) for log in logs],
            label=_label(cell),
            linewidth=1.2,
        )
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _convergence_bars(cells: Sequence["CellResult"], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    names = [_label(c) for c in cells]
    times = [c.convergence_time_s for c in cells]
    ax.bar(range(len(cells)), times, color="tab:blue")
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("time to convergence (s)")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def render_figures(cells: Sequence["CellResult"], out_dir: str | os.PathLike) -> dict:
    """Write the three report PNGs under out_dir; returns name -> path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "accuracy_vs_time.png": root / "accuracy_vs_time.png",
        "f1_vs_time.png": root / "f1_vs_time.png",
        "convergence_time.png": root / "convergence_time.png",
    }
    _metric_vs_time(cells, "eval_accuracy", "eval accuracy", paths["accuracy_vs_time.png"])
    _metric_vs_time(cells, "eval_macro_f1", "eval macro-F1", paths["f1_vs_time.png"])
    _convergence_bars(cells, paths["convergence_time.png"])
    return paths
