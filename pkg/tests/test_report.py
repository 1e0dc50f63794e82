"""
Tests for the result tables.
"""

import io
import os

import pandas as pd
import pytest

from evocompress.exceptions import RunStateError
from evocompress.report import (
    build_table,
    collect_rows,
    format_cell,
    parse_cell,
    render,
    write_reports,
)
from evocompress.utils import setup_run_directory

HEADERS = ["Pipeline", "ROC-AUC", "CPU Latency (ms)", "GPU Latency (ms)",
           "CPU Throughput (IPS)", "GPU Throughput (IPS)", "Model Size (MB)"]


def test_format_cell_examples():
    """Test the value / percent cell format."""
    assert format_cell("size", 14.003, -24.9) == "14.003 / -24.9%"
    assert format_cell("gpu_latency", None) == "∞"
    assert format_cell("size", 18.646, 0.0, original=True) == "18.646"
    assert format_cell("cpu_throughput", 612.4, 22.48) == "612 / +22.5%"


@pytest.mark.parametrize("text, expected", [
    ("14.003 / -24.9%", (14.003, -24.9)),
    ("18.646", (18.646, None)),
    ("∞", (None, None)),
    ("1.0000 / ∞", (1.0, None)),
])
def test_parse_cell(text, expected):
    """Test reading cells back into numbers."""
    assert parse_cell(text) == expected


def test_rows_start_with_original(synthetic_run):
    """Test that the original comes first and members follow by id."""
    rows = collect_rows(synthetic_run)
    assert [label for label, _ in rows] == ["Original", "Pr - Tr", "PDQ"]


def test_table_cells(synthetic_run):
    """Test headers, raw original values and percent changes."""
    table = build_table(collect_rows(synthetic_run))

    assert list(table.columns) == HEADERS
    original, pruned, quantized = (table.iloc[i] for i in range(3))
    assert original["ROC-AUC"] == "0.770"
    assert original["Model Size (MB)"] == "18.646"
    assert pruned["ROC-AUC"] == "0.756 / -1.8%"
    assert pruned["Model Size (MB)"] == "14.003 / -24.9%"
    assert pruned["CPU Latency (ms)"] == "1.5000 / -25.0%"
    assert pruned["GPU Latency (ms)"] == "1.0000 / +0.0%"
    assert quantized["GPU Latency (ms)"] == "∞"
    assert quantized["GPU Throughput (IPS)"] == "∞"
    assert parse_cell(quantized["Model Size (MB)"]) == (4.662, -75.0)


def test_render_formats(synthetic_run):
    """Test the csv, markdown and text renderings."""
    table = build_table(collect_rows(synthetic_run))

    assert pd.read_csv(io.StringIO(render(table, "csv"))).shape == (3, 7)
    markdown = render(table, "md").splitlines()
    assert [cell.strip() for cell in markdown[0].strip("|").split("|")] == HEADERS
    assert "| 2.0000 " in markdown[2]
    assert any("Pr - Tr" in line for line in markdown[2:])
    assert len(markdown) == 5
    assert "Pr - Tr" in render(table, "txt")
    with pytest.raises(ValueError):
        render(table, "html")


def test_write_reports(synthetic_run):
    """Test that every format is written under reports/."""
    paths = write_reports(synthetic_run)

    assert set(paths) == {"csv", "md", "txt"}
    for fmt, path in paths.items():
        assert os.path.exists(path)
        assert path.endswith(os.path.join("reports", f"report.{fmt}"))


def test_report_without_search(tmp_path):
    """Test that an empty run directory cannot be reported."""
    run_dir = setup_run_directory(str(tmp_path / "empty"))
    with pytest.raises(RunStateError):
        collect_rows(run_dir)
