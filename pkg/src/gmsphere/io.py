"""File output: legacy ASCII VTK surfaces and CSV time series."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import SurfaceMesh


def write_vtk(path, mesh: SurfaceMesh, point_data: dict | None = None, title: str = "gmsphere") -> Path:
    """Write ``mesh`` as legacy ASCII POLYDATA with optional scalar point fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET POLYDATA"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(" ".join(f"{c:.17g}" for c in p) for p in mesh.vertices)
    lines.append(f"POLYGONS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (mesh.n_vertices,):
                raise ValueError(f"field {name!r} has shape {values.shape}, expected ({mesh.n_vertices},)")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{x:.17g}" for x in values)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path):
    """Read files written by :func:`write_vtk`; returns ``(vertices, triangles, fields)``."""
    tokens = Path(path).read_text().split("\n")
    it = iter(tokens)
    vertices = triangles = None
    fields = {}
    n_points = 0
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            n_points = int(parts[1])
            vertices = np.array([[float(x) for x in next(it).split()] for _ in range(n_points)])
        elif parts[0] == "POLYGONS":
            triangles = np.array([[int(x) for x in next(it).split()[1:]] for _ in range(int(parts[1]))], dtype=np.int64)
        elif parts[0] == "SCALARS":
            next(it)  # lookup table
            fields[parts[1]] = np.array([float(next(it)) for _ in range(n_points)])
    return vertices, triangles, fields


class CsvSeries:
    """Append-only CSV writer with a fixed header."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.columns)

    def append(self, row: dict) -> None:
        self._writer.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{x:.12g}"
    return x


def write_rows(path, rows: list[dict], columns=None) -> Path:
    columns = columns or (list(rows[0]) if rows else [])
    with CsvSeries(path, columns) as out:
        for row in rows:
            out.append(row)
    return Path(path)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
