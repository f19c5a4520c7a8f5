"""Module for formatting and writing experiment reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

NO_RESULTS = "No results"


def _to_builtin(value: Any) -> Any:
    """Convert numpy scalars and arrays, and non-finite floats, into JSON-safe values."""
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating | float):
        number = float(value)
        return number if math.isfinite(number) else None
    if isinstance(value, Path):
        return str(value)
    return value


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float | np.floating):
        return f"{float(value):.4f}"
    return str(value)


@dataclass
class ReportSection:
    """One table of a report.

    Attributes:
        name: Section identifier, also used as the CSV file suffix
        columns: Column headers
        rows: Table rows, one value per column
    """

    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)


class ReportOutputter:
    """Formats an experiment report as JSON, aligned text tables or CSV."""

    def __init__(self, title: str, provenance: dict[str, Any] | None = None) -> None:
        """Initialize the outputter.

        Args:
            title: Report title, e.g. "evaluate fgsm"
            provenance: Config hash, seed and input artifacts the report was built from
        """
        self.title: str = title
        self.provenance: dict[str, Any] = provenance or {}
        self.sections: list[ReportSection] = []
        self.data: dict[str, Any] = {}

    def add_section(self, name: str, columns: list[str], rows: list[list[Any]]) -> None:
        self.sections.append(ReportSection(name, list(columns), [list(row) for row in rows]))

    def add_data(self, key: str, value: Any) -> None:
        """Attach a machine-readable payload that appears in the JSON rendering only."""
        self.data[key] = value

    def to_json(self) -> str:
        """Convert the report to JSON.

        Keys are sorted and the indentation is fixed, so identical results render to identical
        bytes.

        Returns:
            JSON string representation of the report
        """
        payload = {
            "title": self.title,
            "provenance": self.provenance,
            "data": self.data,
            "sections": [
                {"name": section.name, "columns": section.columns, "rows": section.rows}
                for section in self.sections
            ],
        }
        return json.dumps(_to_builtin(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_text(self) -> str:
        """Render every section as an aligned plain-text table."""
        lines = [self.title, "=" * len(self.title)]
        if not self.sections:
            lines.append(NO_RESULTS)
        for section in self.sections:
            lines.extend(["", section.name])
            cells = [[_cell(value) for value in row] for row in section.rows]
            widths = [len(column) for column in section.columns]
            for row in cells:
                widths = [max(width, len(value)) for width, value in zip(widths, row, strict=True)]
            lines.append("  ".join(column.ljust(width) for column, width in zip(section.columns, widths, strict=True)))
            lines.append("  ".join("-" * width for width in widths))
            for row in cells:
                lines.append("  ".join(value.ljust(width) for value, width in zip(row, widths, strict=True)).rstrip())
            if not cells:
                lines.append(NO_RESULTS)
        return "\n".join(lines) + "\n"

    def to_csv(self, name: str) -> str:
        """Render one section as comma-separated values with a header row.

        Raises:
            KeyError: If the report has no section called `name`
        """
        for section in self.sections:
            if section.name == name:
                buffer = io.StringIO()
                writer = csv.writer(buffer, lineterminator="\n")
                writer.writerow(section.columns)
                writer.writerows(_to_builtin(section.rows))
                return buffer.getvalue()
        raise KeyError(name)

    def write(self, directory: Path, stem: str) -> list[Path]:
        """Write `<stem>.json`, `<stem>.txt` and one `<stem>-<section>.csv` per section.

        Returns:
            The written paths, JSON first
        """
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / f"{stem}.json", directory / f"{stem}.txt"]
        written[0].write_text(self.to_json(), encoding="utf-8")
        written[1].write_text(self.to_text(), encoding="utf-8")
        for section in self.sections:
            path = directory / f"{stem}-{section.name}.csv"
            path.write_text(self.to_csv(section.name), encoding="utf-8")
            written.append(path)
        return written
