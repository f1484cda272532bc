"""Report serialisation: JSON (full metadata), CSV (matrices), x,y plot data.

JSON keeps insertion order, with two-space indentation and a trailing
newline, so reruns diff cleanly. Floats are written with ``repr``
precision and read back exactly. CSV files open with ``#`` comment lines
carrying the master seed and resolved config, then the header row.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import ReportIOError
from .evaluation import AblationResult, TransferMatrix

MATRIX_HEADER = ("surrogate", "victim", "rate", "white_box", "filtered", "unfiltered_rate")
FORMATS = ("csv", "json")


def to_plain(obj):
    """Recursively convert numpy values, tuples and dataclass reports to JSON types."""
    if isinstance(obj, (TransferMatrix, AblationResult)) or hasattr(obj, "to_dict"):
        return to_plain(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(to_plain(obj), indent=2, allow_nan=True) + "\n"


def _comment_lines(meta: dict | None) -> str:
    if not meta:
        return ""
    return "".join(f"# {k}: {json.dumps(to_plain(v), separators=(',', ':'))}\n" for k, v in meta.items())


def matrix_csv(m: TransferMatrix, meta: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write(_comment_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATRIX_HEADER)
    for row in m.rows():
        w.writerow([row["surrogate"], row["victim"], repr(row["rate"]), int(row["white_box"]),
                    int(row["filtered"]), repr(row["unfiltered_rate"])])
    return buf.getvalue()


def xy_csv(pairs, meta: dict | None = None, header=("x", "y")) -> str:
    buf = io.StringIO()
    buf.write(_comment_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for x, y in pairs:
        w.writerow([x, repr(float(y))])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    """Parse a CSV written here, skipping ``#`` comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_meta(path) -> dict:
    meta = {}
    for ln in Path(path).read_text().splitlines():
        if not ln.startswith("# "):
            break
        key, _, value = ln[2:].partition(": ")
        meta[key] = json.loads(value)
    return meta


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise ReportIOError(f"cannot write {path}: {e}") from None
    return path


def emit_report(report, fmt: str, path, meta: dict | None = None) -> Path:
    """Write ``report`` to ``path`` as ``csv`` or ``json``.

    ``meta`` (resolved config, seed...) is embedded: as top-level keys in
    JSON, as comment lines in CSV. CSV is defined for transfer matrices,
    ablations (x,y per grid value) and lists of ``(x, y)`` pairs.
    """
    path = Path(path)
    if fmt == "json":
        body = dict(meta or {})
        body["report"] = report
        return _write(path, dumps_json(body))
    if fmt != "csv":
        raise ReportIOError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if isinstance(report, TransferMatrix):
        return _write(path, matrix_csv(report, meta))
    if isinstance(report, AblationResult):
        return _write(path, xy_csv(report.plot_data(), meta))
    if isinstance(report, list) and all(isinstance(p, (list, tuple)) and len(p) == 2 for p in report):
        return _write(path, xy_csv(report, meta))
    raise ReportIOError(f"no CSV layout for {type(report).__name__}")


def load_json_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ReportIOError(f"cannot read {path}: {e}") from None


def load_matrix(path) -> TransferMatrix:
    doc = load_json_report(path)
    return TransferMatrix.from_dict(doc["report"])
