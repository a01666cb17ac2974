"""Sweep panels and overhead trajectory figures, written as deterministic SVG."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import EpisodeRecord, aggregate  # noqa: E402

logger = logging.getLogger(__name__)

PANELS = (
    ("success_rate", "success rate"),
    ("T_norm", "T_norm [s/m]"),
    ("delta_d", "delta_d [m]"),
    ("E_acc_norm", "E_acc_norm [1/m]"),
)
COLORS = {"rl": "tab:blue", "mpc": "tab:orange"}


def _save(fig: plt.Figure, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "capture", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plots(table: pd.DataFrame, output_dir: Path) -> List[Path]:
    """
    One figure per sweep axis with four panels (success rate and the three
    metrics, mean +/- std against the sweep value, one series per
    controller), plus the aggregated CSV behind it.
    """
    if table.empty:
        raise ValueError("no rows selected for plotting")
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for axis, rows in table.groupby("sweep_axis", sort=True):
        summary = aggregate(rows)
        csv_path = output_dir / f"sweep_{axis}_summary.csv"
        summary.to_csv(csv_path, index=False)
        written.append(csv_path)

        fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
        for ax, (column, label) in zip(axes.flat, PANELS):
            for controller, series in summary.groupby("controller", sort=True):
                color = COLORS.get(str(controller))
                if column == "success_rate":
                    ax.plot(series["sweep_value"], series[column], marker="o", color=color, label=controller)
                else:
                    ax.errorbar(
                        series["sweep_value"],
                        series[f"{column}_mean"],
                        yerr=series[f"{column}_std"].fillna(0.0),
                        marker="o",
                        capsize=3,
                        color=color,
                        label=controller,
                    )
            ax.set_ylabel(label)
            ax.grid(True, alpha=0.3)
        for ax in axes[1]:
            ax.set_xlabel(f"{axis} sweep value")
        axes[0, 0].legend()
        fig.tight_layout()
        written.append(_save(fig, output_dir / f"sweep_{axis}.svg"))
        logger.info("wrote %s sweep plots to %s", axis, output_dir)
    return written


def plot_trajectories(records: Sequence[EpisodeRecord], path: Path, title: str = "") -> Path:
    """Overhead x-y paths for every record, goals marked with their capture radius."""
    if not records:
        raise ValueError("no trajectories selected for plotting")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 7))
    labelled = set()
    for record in records:
        color = COLORS.get(record.controller)
        label = None if record.controller in labelled else record.controller
        labelled.add(record.controller)
        ax.plot(record.states[:, 1], record.states[:, 0], color=color, linewidth=1.2, label=label)
        marker = "o" if record.success else "x"
        ax.plot(record.goal.gy, record.goal.gx, marker, color="black", markersize=4)
        ax.add_patch(plt.Circle((record.goal.gy, record.goal.gx), record.success_radius, fill=False, color="grey"))
    # x forward drawn upward, positive y (left) drawn to the left
    ax.invert_xaxis()
    ax.set_xlabel("y [m]")
    ax.set_ylabel("x [m]")
    ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
