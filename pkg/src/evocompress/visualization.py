"""
Percent-change chart of the archive members.

One group of bars per pipeline, one bar per metric, heights are the percent
change against the original model.
"""

import os
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .metrics import MetricVector, percent_change  # noqa: E402
from .report import COLUMNS, QUALITY_HEADERS, collect_rows  # noqa: E402

PLOT_NAME = "percent_change.svg"


def percent_change_frame(rows: Sequence[Tuple[str, MetricVector]]) -> pd.DataFrame:
    """
    Pipelines x metrics table of percent changes against the first row.

    The original itself is not a row; unavailable changes are NaN.
    """
    original = rows[0][1]
    quality_header = QUALITY_HEADERS.get(original.quality_metric, original.quality_metric)
    headers = [header or quality_header for header, _ in COLUMNS.values()]
    data = []
    labels = []
    for label, m in rows[1:]:
        changes = percent_change(original, m, tuple(COLUMNS))
        data.append([np.nan if changes[a] is None else changes[a] for a in COLUMNS])
        labels.append(label)
    return pd.DataFrame(data, index=labels, columns=headers, dtype=float)


def create_percent_change_plot(
    frame: pd.DataFrame,
    title: str = "Percentage Change in Metrics by Pipeline",
    output_path: Optional[str] = None,
    figsize: Optional[tuple] = None,
) -> plt.Figure:
    """
    Grouped bar chart of a :func:`percent_change_frame`.

    Parameters
    ----------
    frame : pandas.DataFrame
        Rows are pipelines, columns are metrics.
    title : str
        Figure title.
    output_path : str, optional
        Saved as SVG when the suffix is ``.svg``, else by matplotlib's
        suffix rule.
    figsize : tuple, optional
        Defaults to a width that grows with the number of pipelines.

    Returns
    -------
    matplotlib.figure.Figure
    """
    n_rows = max(len(frame), 1)
    n_cols = len(frame.columns)
    if figsize is None:
        figsize = (max(6.0, 1.4 * n_rows + 2.0), 4.5)
    fig, ax = plt.subplots(figsize=figsize)

    width = 0.8 / max(n_cols, 1)
    x = np.arange(len(frame))
    colors = plt.cm.tab10(np.arange(n_cols) % 10)
    for j, column in enumerate(frame.columns):
        values = frame[column].to_numpy(dtype=float)
        shown = ~np.isnan(values)
        if not shown.any():
            continue
        ax.bar(x[shown] + (j - (n_cols - 1) / 2) * width, values[shown], width,
               label=column, color=colors[j])

    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(list(frame.index), rotation=30, ha="right")
    ax.set_ylabel("Change vs. original (%)")
    ax.set_title(title)
    if len(frame):
        ax.legend(fontsize=8, ncol=2)
    else:
        ax.text(0.5, 0.5, "No compressed pipeline in the archive", transform=ax.transAxes,
                ha="center", va="center")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()

    if output_path:
        fig.savefig(output_path, bbox_inches="tight")
    return fig


def plot_percent_change(run_dir: str, output_path: Optional[str] = None) -> str:
    """Write ``reports/percent_change.svg`` for a run directory; returns its path."""
    frame = percent_change_frame(collect_rows(run_dir))
    if output_path is None:
        output_path = os.path.join(run_dir, "reports", PLOT_NAME)
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    fig = create_percent_change_plot(frame, output_path=output_path)
    plt.close(fig)
    return output_path
