"""Per-epoch metrics CSV."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from mimae.errors import FormatError

COLUMNS = ("epoch", "step", "lr", "rec", "max_mi", "min_mi", "approx", "gate_open", "probe_acc")
_INT = {"epoch", "step", "gate_open"}


def _fmt(key, value) -> str:
    if value is None or value == "":
        return ""
    if key in _INT:
        return str(int(value))
    return repr(float(value))


def metrics_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([_fmt(k, row.get(k)) for k in COLUMNS])
    return buf.getvalue()


def write_metrics(path, rows) -> Path:
    """Write the header and one row per epoch (rewrites the whole file)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(metrics_text(rows), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write metrics: {exc.strerror or exc}") from exc
    return path


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV; numeric columns become int/float, empty cells None."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty metrics file (no header)", path, 0) from None
    missing = [c for c in COLUMNS if c not in header and c != "probe_acc"]
    if missing:
        raise FormatError(f"header lacks columns {missing}", path, 0)
    rows = []
    for i, cells in enumerate(reader, start=1):
        if not cells:
            continue
        if len(cells) != len(header):
            raise FormatError(f"row {i}: expected {len(header)} cells, found {len(cells)}", path, i)
        row = {}
        for key, cell in zip(header, cells):
            if cell == "":
                row[key] = None
                continue
            try:
                row[key] = int(cell) if key in _INT else float(cell)
            except ValueError:
                raise FormatError(f"row {i}: column {key!r} has non-numeric value {cell!r}", path, i) from None
            if key not in _INT and not math.isfinite(row[key]):
                raise FormatError(f"row {i}: column {key!r} is not finite", path, i)
        rows.append(row)
    return rows
