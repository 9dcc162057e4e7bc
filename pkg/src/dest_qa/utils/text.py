"""Text formatting utilities for reports."""

from __future__ import annotations

from typing import Sequence


def format_fields(headers: Sequence[str], values: Sequence[object]) -> str:
    """One log line from a report row, e.g. `split=qa question_type=overall accuracy=0.5 n=2`.

    Empty cells are left out.

    Raises:
        ValueError: If the row and the header differ in length.
    """
    return " ".join(f"{h}={v}" for h, v in zip(headers, values, strict=True) if v != "")


def format_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Render rows as a fixed-width text table with a header rule.

    Raises:
        ValueError: If there are no headers, or a row's width differs from the header's.
    """
    if not headers:
        raise ValueError("table has no header")
    cells = [[str(h) for h in headers]]
    for row in rows:
        if len(row) != len(headers):
            raise ValueError(f"row has {len(row)} cells, header has {len(headers)}")
        cells.append([str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(row: list[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]])


def format_accuracy(value: float) -> str:
    return f"{100.0 * value:6.2f}%"
