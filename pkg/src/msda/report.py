"""Summary tables (methods x settings) from accumulated run CSVs."""

from __future__ import annotations

import csv
import io
import statistics
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .pipeline import METHODS

MISSING = "—"


def read_rows(paths: Iterable[Path]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def _median(values: list) -> Optional[float]:
    return statistics.median(values) if values else None


def method_grid(rows: Sequence[dict], metric: str = "target_test_wer", methods: Sequence[str] = METHODS,
                settings: Optional[Sequence[str]] = None) -> dict:
    """Median of ``metric`` over seeds per (method, setting); None where no run exists."""
    settings = list(settings) if settings is not None else sorted({r["setting"] for r in rows})
    cells: dict = {(m, s): [] for m in methods for s in settings}
    for r in rows:
        key = (r["method"], r["setting"])
        if key in cells and r.get(metric) not in (None, ""):
            cells[key].append(float(r[metric]))
    return {"methods": list(methods), "settings": settings,
            "values": {k: _median(v) for k, v in cells.items()},
            "counts": {k: len(v) for k, v in cells.items()}}


def _cell(value: Optional[float], scale: float) -> str:
    return MISSING if value is None else f"{value * scale:.2f}"


def render_text(grid: dict, scale: float = 100.0) -> str:
    """Aligned plain-text table, WER in percent."""
    header = ["method"] + grid["settings"]
    body = [[m] + [_cell(grid["values"][(m, s)], scale) for s in grid["settings"]] for m in grid["methods"]]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_markdown(grid: dict, scale: float = 100.0) -> str:
    header = ["method"] + grid["settings"]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + ["---:"] * len(grid["settings"])) + "|"]
    for m in grid["methods"]:
        cells = [_cell(grid["values"][(m, s)], scale) for s in grid["settings"]]
        lines.append("| " + " | ".join([m] + cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(grid: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + grid["settings"])
    for m in grid["methods"]:
        w.writerow([m] + ["" if grid["values"][(m, s)] is None else repr(grid["values"][(m, s)])
                          for s in grid["settings"]])
    return buf.getvalue()


def sweep_medians(rows: Sequence[dict], by: str) -> dict:
    """Median WER per (method, ``by`` value) over successful rows of a sweep CSV."""
    groups: dict = {}
    for r in rows:
        if r.get("status") != "ok" or r.get("wer") in (None, ""):
            continue
        groups.setdefault((r["method"], r[by]), []).append(float(r["wer"]))
    return {k: statistics.median(v) for k, v in groups.items()}
