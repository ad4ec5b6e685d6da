"""XYZ point files (canonical) and read-only ASCII PLY."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import as_cloud


class PointFileError(ValueError):
    pass


def parse_xyz(text: str, name: str = "<string>") -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = s.split()
        if len(fields) < 3:
            raise PointFileError(f"{name}: line {lineno}: expected 3 coordinates, got {len(fields)}")
        try:
            rows.append([float(v) for v in fields[:3]])
        except ValueError as exc:
            raise PointFileError(f"{name}: line {lineno}: {exc}") from None
    if not rows:
        raise PointFileError(f"{name}: no points")
    pts = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise PointFileError(f"{name}: non-finite coordinate")
    return pts


def read_xyz(path) -> np.ndarray:
    path = Path(path)
    return parse_xyz(path.read_text(encoding="utf-8"), str(path))


def format_xyz(cloud) -> str:
    pts = as_cloud(cloud)
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts)


def write_xyz(path, cloud) -> None:
    Path(path).write_text(format_xyz(cloud), encoding="utf-8")


def read_ply(path) -> np.ndarray:
    """ASCII PLY with an ``element vertex`` block holding x, y, z properties."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PointFileError(f"{path}: not a PLY file")
    props: list[str] = []
    before: int = 0  # data lines of elements declared ahead of vertex
    current = None
    counts = {}
    order = []
    body = None
    for i, line in enumerate(lines[1:], start=1):
        f = line.split()
        if not f:
            continue
        if f[0] == "format" and f[1] != "ascii":
            raise PointFileError(f"{path}: only ascii PLY is supported")
        if f[0] == "element":
            current = f[1]
            counts[current] = int(f[2])
            order.append(current)
        elif f[0] == "property" and current == "vertex":
            props.append(f[-1])
        elif f[0] == "end_header":
            body = i + 1
            break
    if body is None or "vertex" not in counts:
        raise PointFileError(f"{path}: missing vertex element or end_header")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise PointFileError(f"{path}: vertex element lacks x/y/z") from None
    for name in order:
        if name == "vertex":
            break
        before += counts[name]
    n_vertex = counts["vertex"]
    data = lines[body + before : body + before + n_vertex]
    if len(data) < n_vertex:
        raise PointFileError(f"{path}: expected {n_vertex} vertices, found {len(data)}")
    try:
        pts = np.array([[float(line.split()[c]) for c in cols] for line in data])
    except (ValueError, IndexError) as exc:
        raise PointFileError(f"{path}: bad vertex line: {exc}") from None
    return as_cloud(pts)


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)
