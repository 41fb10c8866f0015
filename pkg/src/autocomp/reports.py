"""Deterministic text/CSV/JSON rendering of benchmark results."""

from __future__ import annotations

import csv
import io
import json
from typing import Any, Mapping, Sequence

FORMATS = ("table", "csv", "json")


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _table_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for index, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        if index == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def _fmt(value: Any, digits: int = 1) -> str:
    if value is None:
        return "n/a"
    return f"{100.0 * value:.{digits}f}"


def render_scores(scores_doc: Mapping[str, Any], fmt: str) -> str:
    """Render an aggregated scores document (the scores.json layout)."""
    if fmt == "json":
        return json.dumps(scores_doc, indent=1, sort_keys=True) + "\n"
    header = ["task", "n", "track", "scheme", "accuracy", "count"]
    rows = [
        [c["task"], c["n"], c["track"], c["scheme"], f"{c['accuracy']:.4f}", c["count"]]
        for c in scores_doc.get("cells", [])
    ]
    if fmt == "csv":
        return _csv_text(header, rows)
    # Paper-style table: one row per (task, n, track), "Swap/Conf" cells.
    by_cell: dict[tuple[str, int, str], dict[str, float]] = {}
    for c in scores_doc.get("cells", []):
        by_cell.setdefault((c["task"], c["n"], c["track"]), {})[c["scheme"]] = c["accuracy"]
    rows = [
        [task, n, track, f"{_fmt(cell.get('swap'))}/{_fmt(cell.get('confusion'))}"]
        for (task, n, track), cell in sorted(by_cell.items())
    ]
    return _table_text(["task", "n", "track", "swap/conf (%)"], rows)


def render_survival(stats_doc: Mapping[str, Any], fmt: str) -> str:
    """Render survival statistics keyed "task/n=N/track"."""
    if fmt == "json":
        return json.dumps(stats_doc, indent=1, sort_keys=True) + "\n"
    header = [
        "task", "n", "track", "generated", "errored",
        "obj_pass", "bg_pass", "attr_pass",
        "obj_rate", "bg_rate", "attr_rate",
    ]
    rows = []
    for key, cell in sorted(stats_doc.items()):
        task, n_part, track = key.split("/")
        rows.append(
            [
                task,
                n_part.removeprefix("n="),
                track,
                cell["generated"],
                cell["errored"],
                cell["passed_object"],
                cell["passed_background"] if cell["passed_background"] is not None else "n/a",
                cell["passed_attribute"],
                _fmt(cell["rate_object"]),
                _fmt(cell["rate_background"]),
                _fmt(cell["rate_attribute"]),
            ]
        )
    if fmt == "csv":
        return _csv_text(header, rows)
    return _table_text(header, rows)


def render_deltas(deltas: Sequence[Mapping[str, Any]], fmt: str) -> str:
    """Render paired-delta rows with explicit signs."""
    if fmt == "json":
        return json.dumps(list(deltas), indent=1, sort_keys=True) + "\n"
    header = ["task", "n", "min_swap", "ctx_swap", "delta_swap",
              "min_conf", "ctx_conf", "delta_conf"]

    def signed(value: Any) -> str:
        if value is None:
            return "n/a"
        return f"{value:+.1f}"

    rows = [
        [
            d["task"],
            d["n"],
            d["swap_minimal"] if d["swap_minimal"] is not None else "n/a",
            d["swap_contextual"] if d["swap_contextual"] is not None else "n/a",
            signed(d["delta_swap"]),
            d["confusion_minimal"] if d["confusion_minimal"] is not None else "n/a",
            d["confusion_contextual"] if d["confusion_contextual"] is not None else "n/a",
            signed(d["delta_confusion"]),
        ]
        for d in deltas
    ]
    if fmt == "csv":
        return _csv_text(header, rows)
    return _table_text(header, rows)
