"""JSON and CSV writers shared by every exported artifact.

Every file carries a metadata block with the tool version and the resolved
configuration; CSV numbers are written with 17 significant digits and JSON
floats use the shortest repr that round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from truncgeo import __version__


def format_number(value: float) -> str:
    return f"{value:.17g}"


def to_serializable(obj):
    if isinstance(obj, dict):
        return {str(k): to_serializable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_serializable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_serializable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def metadata(config: Optional[dict] = None) -> dict:
    return {"tool": "truncgeo", "version": __version__, "config": to_serializable(config or {})}


def _stdout(path) -> bool:
    return str(path) == "-"


def write_json(payload: dict, path: str | Path) -> Optional[Path]:
    """Write to ``path``, or to standard output when it is '-'."""
    text = json.dumps(to_serializable(payload), indent=2, allow_nan=False) + "\n"
    if _stdout(path):
        sys.stdout.write(text)
        return None
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def _write_rows(f: TextIO, header: Sequence[str], rows: Iterable[Sequence], meta: Optional[dict]) -> None:
    for key, value in (meta or {}).items():
        f.write(f"# {key}: {json.dumps(to_serializable(value), sort_keys=True)}\n")
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    meta: Optional[dict] = None,
) -> Optional[Path]:
    """Metadata as '# key: value' comment lines, then the header and rows."""
    if _stdout(path):
        _write_rows(sys.stdout, header, rows, meta)
        return None
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        _write_rows(f, header, rows, meta)
    return path
