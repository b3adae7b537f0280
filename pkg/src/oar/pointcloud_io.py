"""Point cloud containers, text-format readers/writers and frame normalization.

Supported formats are ASCII PLY (vertex element with x/y/z properties),
Wavefront OBJ (``v`` lines only) and plain XYZ (whitespace separated
coordinates, one point per line).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import DegenerateCloud, EmptyCloud, IoError, ParseError

Frame = Literal["original", "normalized"]
Format = Literal["ply_ascii", "obj", "xyz"]

# %.17g round-trips every float64 exactly.
DEFAULT_PRECISION = 17

_SUFFIX_FORMATS = {".ply": "ply_ascii", ".obj": "obj", ".xyz": "xyz", ".txt": "xyz", ".pts": "xyz"}


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: Frame = "original"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloud("point cloud has no points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.frame not in ("original", "normalized"):
            raise ValueError(f"unknown frame {self.frame!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps original coordinates ``p`` to ``(p - mu) / sigma``."""

    mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: float = 1.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(3)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        sigma = float(self.sigma)
        if not (sigma > 0 and math.isfinite(sigma)):
            raise DegenerateCloud(f"normalization scale must be positive, got {sigma}")
        object.__setattr__(self, "sigma", sigma)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mu) / self.sigma

    def invert(self, points: np.ndarray) -> np.ndarray:
        return self.sigma * np.asarray(points, dtype=np.float64) + self.mu

    def to_dict(self) -> dict:
        return {"mu": [float(v) for v in self.mu], "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationTransform":
        return cls(mu=d["mu"], sigma=d["sigma"])


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    try:
        return _SUFFIX_FORMATS[suffix]
    except KeyError:
        raise ParseError(f"cannot infer point cloud format from suffix {suffix!r}", path=path) from None


def _parse_coords(tokens, lineno, path) -> tuple[float, float, float]:
    try:
        xyz = tuple(float(t) for t in tokens)
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {' '.join(tokens)!r}", line=lineno, path=path) from None
    if not all(math.isfinite(v) for v in xyz):
        raise ParseError("non-finite coordinate", line=lineno, path=path)
    return xyz


def _read_xyz(lines, path):
    pts = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.replace(",", " ").split()
        if len(tokens) < 3:
            raise ParseError(f"expected 3 coordinates, got {len(tokens)}", line=lineno, path=path)
        pts.append(_parse_coords(tokens[:3], lineno, path))
    return pts


def _read_obj(lines, path):
    pts = []
    for lineno, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens or tokens[0] != "v":
            continue
        if len(tokens) < 4:
            raise ParseError("vertex record needs 3 coordinates", line=lineno, path=path)
        pts.append(_parse_coords(tokens[1:4], lineno, path))
    return pts


def _read_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1, path=path)
    n_vertex = None
    props: list[str] = []
    elements_before: list[tuple[str, int, int]] = []  # (name, count, nprops) preceding vertex
    current = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got format {' '.join(tokens[1:])!r}",
                                 line=lineno, path=path)
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", line=lineno, path=path)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError("element count is not an integer", line=lineno, path=path) from None
            current = tokens[1]
            if current == "vertex":
                n_vertex = count
            elif n_vertex is None:
                elements_before.append((current, count, 0))
        elif key == "property":
            if current == "vertex":
                if tokens[1] == "list":
                    raise ParseError("list properties on vertices are not supported", line=lineno, path=path)
                props.append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {key!r}", line=lineno, path=path)
    if header_end is None:
        raise ParseError("missing end_header", path=path)
    if n_vertex is None:
        raise ParseError("no vertex element declared", path=path)
    if elements_before:
        raise ParseError("vertex element must come first", path=path)
    if n_vertex == 0:
        raise EmptyCloud(f"{path}: PLY declares 0 vertices")
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise ParseError("vertex element lacks x/y/z properties", path=path) from None

    pts = []
    body = lines[header_end:]
    for offset in range(n_vertex):
        lineno = header_end + offset + 1
        if offset >= len(body):
            raise ParseError(f"expected {n_vertex} vertices, file ends early", line=lineno, path=path)
        tokens = body[offset].split()
        if len(tokens) < len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", line=lineno, path=path)
        pts.append(_parse_coords((tokens[ix], tokens[iy], tokens[iz]), lineno, path))
    return pts


_READERS = {"xyz": _read_xyz, "obj": _read_obj, "ply_ascii": _read_ply}


def load_cloud(path, format: Format | None = None) -> PointCloud:
    """Read a point cloud; ``format`` defaults to one inferred from the suffix."""
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt not in _READERS:
        raise ParseError(f"unknown format {fmt!r}", path=path)
    raw = path.read_bytes()  # FileNotFoundError propagates
    if fmt == "ply_ascii" and b"format binary" in raw[:512]:
        raise ParseError("binary PLY is not supported", path=path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("file is not valid UTF-8 text", path=path) from None
    pts = _READERS[fmt](text.splitlines(), path)
    if not pts:
        raise EmptyCloud(f"{path}: no points")
    return PointCloud(np.array(pts, dtype=np.float64), frame="original")


def format_points(points: np.ndarray, precision: int = DEFAULT_PRECISION) -> list[str]:
    fmt = f"%.{precision}g %.{precision}g %.{precision}g"
    return [fmt % tuple(p) for p in points]


def save_cloud(cloud: PointCloud, path, format: Format | None = None,
               precision: int = DEFAULT_PRECISION) -> None:
    path = Path(path)
    fmt = format or infer_format(path)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    rows = format_points(pts, precision)
    if fmt == "ply_ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(rows)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        lines = header + rows
    elif fmt == "obj":
        lines = ["v " + r for r in rows]
    elif fmt == "xyz":
        lines = rows
    else:
        raise ValueError(f"unknown format {fmt!r}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center on the mean and scale so the farthest point sits at radius 1."""
    if cloud.frame != "original":
        raise ValueError("normalize expects a cloud in the original frame")
    pts = cloud.points
    mu = pts.mean(axis=0)
    sigma = float(np.sqrt(((pts - mu) ** 2).sum(axis=1)).max())
    if not sigma > 0:
        raise DegenerateCloud("all points coincide; cannot normalize")
    transform = NormalizationTransform(mu=mu, sigma=sigma)
    return PointCloud(transform.apply(pts), frame="normalized"), transform


def to_target_frame(deformed_normalized: PointCloud,
                    target_transform: NormalizationTransform) -> PointCloud:
    if deformed_normalized.frame != "normalized":
        raise ValueError("to_target_frame expects a cloud in the normalized frame")
    return PointCloud(target_transform.invert(deformed_normalized.points), frame="original")
