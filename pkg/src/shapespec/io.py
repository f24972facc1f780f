"""File formats: CSV point clouds, JSON documents, CSV tables and JSON-lines."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .geometry import CloudError, PointCloud
from .zernike import MomentTensor


class CloudFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


_HEADERS = (["x", "y", "z"], ["x", "y", "z", "w"])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_cloud(cloud: PointCloud, path, weights: bool | None = None) -> None:
    """Write ``x,y,z[,w]`` rows; weights are written when any differs from 1 unless forced."""
    if weights is None:
        weights = not np.all(cloud.weights == 1.0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_HEADERS[1] if weights else _HEADERS[0])
        for p, wt in zip(cloud.points, cloud.weights):
            row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])]
            if weights:
                row.append(_fmt(wt))
            w.writerow(row)


def load_cloud(path) -> PointCloud:
    """Read a CSV cloud; 3 columns give unit weights, 4 columns read them."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CloudFormatError("empty file", 1)
    header = [h.strip().lower() for h in rows[0]]
    if header not in _HEADERS:
        raise CloudFormatError(f"header must be x,y,z or x,y,z,w, got {','.join(rows[0])!r}", 1)
    ncol = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != ncol:
            raise CloudFormatError(f"expected {ncol} fields, got {len(row)}", lineno)
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise CloudFormatError(f"non-numeric field in {','.join(row)!r}", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise CloudFormatError("non-finite value", lineno)
        data.append(vals)
    if not data:
        raise CloudFormatError("no points", len(rows))
    arr = np.array(data, dtype=float)
    try:
        return PointCloud(arr[:, :3], arr[:, 3] if ncol == 4 else None)
    except CloudError as exc:
        raise CloudFormatError(str(exc)) from None


def to_jsonable(obj):
    """Recursively convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_moments(C: MomentTensor, path) -> None:
    save_json(C.to_dict(), path)


def load_moments(path) -> MomentTensor:
    return MomentTensor.from_dict(load_json(path))


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(to_jsonable(r)) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
