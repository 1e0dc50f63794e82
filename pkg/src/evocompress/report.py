"""
Result tables of a run directory.

One row per pipeline: ``Original`` first with raw values, then the archive
members by id, each cell ``value / +x.x%`` against the original. Values a
device cannot produce are shown as ``∞``.
"""

import os
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .exceptions import RunStateError
from .metrics import MetricVector, format_percent, metric_vector_from_dict, percent_change
from .utils import STATE_NAME, individual_dir, read_json

REPORT_FORMATS = ("csv", "md", "txt")
UNAVAILABLE = "∞"

QUALITY_HEADERS = {"roc_auc": "ROC-AUC", "f1": "F1", "rmse": "RMSE"}

# axis -> (header, decimals); quality's header comes from the metric
COLUMNS = {
    "quality": (None, 3),
    "cpu_latency": ("CPU Latency (ms)", 4),
    "gpu_latency": ("GPU Latency (ms)", 4),
    "cpu_throughput": ("CPU Throughput (IPS)", 0),
    "gpu_throughput": ("GPU Throughput (IPS)", 0),
    "size": ("Model Size (MB)", 3),
}


def format_value(axis: str, value: Optional[float]) -> str:
    if value is None:
        return UNAVAILABLE
    return f"{value:.{COLUMNS[axis][1]}f}"


def format_cell(axis: str, value: Optional[float], change: Optional[float] = None,
                original: bool = False) -> str:
    """
    Render one table cell.

    Examples
    --------
    >>> format_cell("size", 14.003, -24.9)
    '14.003 / -24.9%'
    >>> format_cell("gpu_latency", None)
    '∞'
    """
    text = format_value(axis, value)
    if original or value is None or change is None:
        return text
    return f"{text} / {format_percent(change)}"


def parse_cell(text: str) -> Tuple[Optional[float], Optional[float]]:
    """Inverse of :func:`format_cell`: ``(value, percent)``, ``None`` where absent."""
    text = str(text).strip()
    if text == UNAVAILABLE:
        return None, None
    value, _, change = text.partition(" / ")
    pct = None if not change or change == UNAVAILABLE else float(change.rstrip("%"))
    return float(value), pct


def _metrics(run_dir: str, individual_id: int) -> Optional[MetricVector]:
    data = read_json(os.path.join(individual_dir(run_dir, individual_id), "metrics.json"))
    if not data or data.get("metrics") is None:
        return None
    return metric_vector_from_dict(data["metrics"])


def archive_members(run_dir: str) -> List[dict]:
    """Members from ``archive/manifest.json``, else from the last saved state."""
    manifest = read_json(os.path.join(run_dir, "archive", "manifest.json"))
    if manifest is not None:
        return manifest["members"]
    state = read_json(os.path.join(run_dir, STATE_NAME))
    if state is None:
        raise RunStateError(f"No archive or state in {run_dir}; run the search first")
    by_id = {d["id"]: d for d in state["individuals"]}
    members = []
    for m in state["archive"]["members"]:
        ind = by_id[m["id"]]
        members.append({"id": m["id"], "label": ind.get("label"), "pipeline": ind["pipeline_string"],
                        "checkpoint": ind.get("checkpoint"), "objectives": m["objectives"]})
    return members


def collect_rows(run_dir: str) -> List[Tuple[str, MetricVector]]:
    """``(label, metrics)`` of the original followed by every non-original archive member."""
    original = _metrics(run_dir, 0)
    if original is None:
        raise RunStateError(f"The original model of {run_dir} has not been evaluated yet")
    rows = [("Original", original)]
    for member in sorted(archive_members(run_dir), key=lambda m: m["id"]):
        if member["id"] == 0:
            continue
        metrics = _metrics(run_dir, member["id"])
        if metrics is not None:
            rows.append((member.get("label") or member["pipeline"], metrics))
    return rows


def build_table(rows: Sequence[Tuple[str, MetricVector]]) -> pd.DataFrame:
    """Table of formatted cells; the first row is the reference of every percent change."""
    if not rows:
        raise ValueError("No rows to report")
    original = rows[0][1]
    quality_header = QUALITY_HEADERS.get(original.quality_metric, original.quality_metric)
    headers = ["Pipeline"] + [header or quality_header for header, _ in COLUMNS.values()]
    records = []
    for i, (label, m) in enumerate(rows):
        changes = percent_change(original, m, tuple(COLUMNS))
        cells = [label]
        for axis in COLUMNS:
            value = float(m.value(axis)) if m.available(axis) else None
            cells.append(format_cell(axis, value, changes[axis], original=(i == 0)))
        records.append(cells)
    return pd.DataFrame(records, columns=headers)


def to_markdown(table: pd.DataFrame) -> str:
    # cells are preformatted strings; keep tabulate from re-parsing numbers
    return table.to_markdown(index=False, disable_numparse=True) + "\n"


def render(table: pd.DataFrame, fmt: str) -> str:
    if fmt == "csv":
        return table.to_csv(index=False)
    if fmt == "md":
        return to_markdown(table)
    if fmt == "txt":
        return table.to_string(index=False) + "\n"
    raise ValueError(f"Unknown report format '{fmt}' (choose from {REPORT_FORMATS})")


def write_reports(run_dir: str, formats: Sequence[str] = REPORT_FORMATS) -> Dict[str, str]:
    """
    Write ``reports/report.<fmt>`` for each format.

    Returns
    -------
    dict
        Format -> path of the written file.
    """
    table = build_table(collect_rows(run_dir))
    out_dir = os.path.join(run_dir, "reports")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for fmt in formats:
        path = os.path.join(out_dir, f"report.{fmt}")
        with open(path, "w", encoding="utf-8") as f:
            f.write(render(table, fmt))
        paths[fmt] = path
    return paths
