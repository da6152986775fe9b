"""Text side files: pose tables, slice sidecars, key-value configs, manifests, reports.

All files are UTF-8 with LF line endings and ``.`` as decimal separator.
Floats are written with ``repr`` so they round-trip exactly and identical
inputs produce identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidParameterError
from .forward import ScatteredSlice
from .geometry import RigidTransform

__all__ = [
    "MOTION_COLUMNS",
    "SIDECAR_COLUMNS",
    "REPORT_COLUMNS",
    "PoseRow",
    "format_value",
    "parse_value",
    "read_key_values",
    "write_key_values",
    "read_motion_csv",
    "write_motion_csv",
    "read_sidecar",
    "write_sidecar",
    "write_report_csv",
    "write_table_csv",
    "sha256_file",
]

MOTION_COLUMNS = ("slice_index", "volume_index", "rx_deg", "ry_deg", "rz_deg", "tx_mm", "ty_mm", "tz_mm")
SIDECAR_COLUMNS = ("stack_index", "slice_index", "volume_index", "acq_time_s", "sigma_k") + MOTION_COLUMNS[2:]
REPORT_COLUMNS = ("iter", "data_term", "reg_term", "total")


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if v == 0.0:
            return "0.0"  # collapse -0.0
        return repr(v)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    text = str(value)
    if "\n" in text:
        raise InvalidParameterError(f"value {text!r} spans several lines")
    return text


def parse_value(text: str) -> object:
    """Best-effort typed value: bool, int, float, comma list, else the string."""
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in t:
        return tuple(parse_value(p) for p in t.split(","))
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def read_key_values(path: str | os.PathLike) -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise InvalidParameterError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
            key, value = (p.strip() for p in body.split("=", 1))
            if not key:
                raise InvalidParameterError(f"{path}:{lineno}: empty key")
            if key in out:
                raise InvalidParameterError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = parse_value(value)
    return out


def write_key_values(path: str | os.PathLike, values: Mapping[str, object], header: str = "") -> None:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [f"{k} = {format_value(values[k])}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_csv(path, columns: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def _read_csv(path, columns: Sequence[str]) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise InvalidParameterError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def _float(row: Mapping[str, str], key: str, path) -> float:
    try:
        v = float(row[key])
    except (TypeError, ValueError):
        raise InvalidParameterError(f"{path}: bad value {row[key]!r} in column {key}") from None
    if not math.isfinite(v):
        raise InvalidParameterError(f"{path}: non-finite value in column {key}")
    return v


def _int(row: Mapping[str, str], key: str, path) -> int:
    try:
        return int(row[key])
    except (TypeError, ValueError):
        raise InvalidParameterError(f"{path}: bad integer {row[key]!r} in column {key}") from None


@dataclass(frozen=True)
class PoseRow:
    slice_index: int
    volume_index: int
    pose: RigidTransform


def write_motion_csv(path: str | os.PathLike, slices: Sequence[ScatteredSlice]) -> None:
    """One row per slice in acquisition-time order; angles in degrees, shifts in mm."""
    order = sorted(range(len(slices)), key=lambda n: (slices[n].acq_time, n))
    rows = []
    for n in order:
        s = slices[n]
        rows.append((s.slice_index, s.volume_index, *(float(p) for p in s.pose.params())))
    _write_csv(path, MOTION_COLUMNS, rows)


def read_motion_csv(path: str | os.PathLike, center: Sequence[float]) -> list[PoseRow]:
    rows = _read_csv(path, MOTION_COLUMNS)
    out = []
    for row in rows:
        params = [_float(row, c, path) for c in MOTION_COLUMNS[2:]]
        out.append(PoseRow(_int(row, "slice_index", path), _int(row, "volume_index", path),
                           RigidTransform.from_params(params, center=center)))
    return out


def apply_motion(slices: Sequence[ScatteredSlice], rows: Sequence[PoseRow]) -> list[ScatteredSlice]:
    """Replace slice poses by the matching ``(volume_index, slice_index)`` rows."""
    table = {}
    for r in rows:
        key = (r.volume_index, r.slice_index)
        if key in table:
            raise InvalidParameterError(f"duplicate pose for volume {key[0]} slice {key[1]}")
        table[key] = r.pose
    out = []
    for s in slices:
        key = (s.volume_index, s.slice_index)
        if key not in table:
            raise InvalidParameterError(f"no pose for volume {key[0]} slice {key[1]}")
        out.append(s.with_pose(table[key]))
    return out


def write_sidecar(path: str | os.PathLike, slices: Sequence[ScatteredSlice]) -> None:
    """Per-slice metadata for a slice stack; row ``n`` describes stack index ``n``."""
    rows = [
        (n, s.slice_index, s.volume_index, float(s.acq_time), float(s.sigma_k), *(float(p) for p in s.pose.params()))
        for n, s in enumerate(slices)
    ]
    _write_csv(path, SIDECAR_COLUMNS, rows)


def read_sidecar(
    path: str | os.PathLike,
    stack: np.ndarray,
    in_plane_spacing: Sequence[float],
    slice_thickness: float,
    origin: Sequence[float],
    center: Sequence[float],
) -> list[ScatteredSlice]:
    """Rebuild slices from a ``[u, v, 1, n]`` stack and its sidecar."""
    rows = _read_csv(path, SIDECAR_COLUMNS)
    data = np.asarray(stack, dtype=float)
    if data.ndim == 3:
        data = data[:, :, None, :]
    if data.ndim != 4 or data.shape[2] != 1:
        raise InvalidParameterError(f"slice stack must have shape (nu, nv, 1, n), got {stack.shape}")
    if len(rows) != data.shape[3]:
        raise InvalidParameterError(f"{path}: {len(rows)} rows for {data.shape[3]} stacked slices")
    slices = []
    for n, row in enumerate(rows):
        if _int(row, "stack_index", path) != n:
            raise InvalidParameterError(f"{path}: row {n} has stack_index {row['stack_index']}")
        params = [_float(row, c, path) for c in MOTION_COLUMNS[2:]]
        slices.append(
            ScatteredSlice(
                data[:, :, 0, n],
                _int(row, "volume_index", path),
                _int(row, "slice_index", path),
                _float(row, "acq_time_s", path),
                RigidTransform.from_params(params, center=center),
                (float(in_plane_spacing[0]), float(in_plane_spacing[1])),
                float(slice_thickness),
                _float(row, "sigma_k", path),
                tuple(float(o) for o in origin),
            )
        )
    return slices


def write_report_csv(path: str | os.PathLike, rows: Iterable[tuple[int, float, float, float]]) -> None:
    _write_csv(path, REPORT_COLUMNS, rows)


def write_table_csv(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, object]]) -> None:
    _write_csv(path, columns, ([r[c] for c in columns] for r in rows))
