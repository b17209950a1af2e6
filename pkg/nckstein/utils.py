"""File IO helpers: JSON documents, CSV tables and particle files."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

PARTICLE_MAGIC = "nckstein-particles"


def write_json(path: Path, data: dict) -> None:
    """Write a JSON document to ``path``."""
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def read_json(path: Path) -> dict:
    """Read and return JSON content from ``path``."""
    return json.loads(path.read_text())


def csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Render rows as CSV text with ``\\n`` line endings."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(value) for value in row])
    return buffer.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Write a CSV table; floats use ``repr`` so values round-trip exactly."""
    path.write_text(csv_text(header, rows))


def format_value(value: object) -> str:
    """Round-trippable text for a CSV cell."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def save_particles(
    path: Path, data: np.ndarray, *, level: int = 0, sigma: float = 0.0
) -> None:
    """Persist an ``(n, d)`` particle array with its text header."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"particles must be 2-d, got shape {data.shape}")
    n, d = data.shape
    header = f"{PARTICLE_MAGIC} n={n} d={d} level={level} sigma={float(sigma)!r}\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_particle_header(path: Path) -> dict:
    """Return the parsed header fields of a particle file."""
    with path.open("rb") as f:
        line = f.readline().decode("ascii").strip()
    return _parse_header(line, path)


def load_particles(path: Path) -> np.ndarray:
    """Load a particle file written by :func:`save_particles`."""
    with path.open("rb") as f:
        line = f.readline().decode("ascii").strip()
        payload = f.read()
    header = _parse_header(line, path)
    n, d = header["n"], header["d"]
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != n * d:
        raise DegenerateInputError(
            f"{path}: expected {n * d} values, found {values.size}"
        )
    return values.reshape(n, d).astype(np.float64)


def _parse_header(line: str, path: Path) -> dict:
    parts = line.split()
    if not parts or parts[0] != PARTICLE_MAGIC:
        raise DegenerateInputError(f"{path}: not a particle file")
    fields = dict(part.split("=", 1) for part in parts[1:])
    try:
        return {
            "n": int(fields["n"]),
            "d": int(fields["d"]),
            "level": int(fields["level"]),
            "sigma": float(fields["sigma"]),
        }
    except (KeyError, ValueError) as exc:
        raise DegenerateInputError(f"{path}: malformed header {line!r}") from exc
