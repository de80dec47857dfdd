"""Synthetic labelled scenes and ASCII point-cloud files (PLY, XYZ)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

KINDS = ("plane", "box", "sphere", "cylinder")


class DataError(ValueError):
    pass


@dataclass
class Primitive:
    """A surface to sample.

    ``extent`` is (sx, sy) for planes, (sx, sy, sz) for boxes, (radius,) for
    spheres and (radius, height) for cylinders. ``yaw`` rotates about z.
    """

    kind: str
    center: tuple[float, float, float]
    extent: tuple[float, ...]
    class_id: int
    density: float  # points per square metre
    yaw: float = 0.0


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    num_classes: int = 3
    outliers: int = 0
    outlier_spread: float = 1.0  # metres beyond the primitives' bounding box
    noise: float = 0.0
    seed: int = 0
    color: bool = False

    @property
    def noise_label(self) -> int:
        return self.num_classes

    def validate(self) -> None:
        for p in self.primitives:
            if p.kind not in KINDS:
                raise DataError(f"unknown primitive kind {p.kind!r}")
            if not p.density > 0:
                raise DataError(f"density must be positive, got {p.density}")
            if not 0 <= p.class_id < self.num_classes:
                raise DataError(f"class id {p.class_id} outside [0, {self.num_classes - 1}]")
        if self.outliers < 0:
            raise DataError("outlier count must be >= 0")


def _area(p: Primitive) -> float:
    if p.kind == "plane":
        return p.extent[0] * p.extent[1]
    if p.kind == "box":
        sx, sy, sz = p.extent
        return 2 * (sx * sy + sx * sz + sy * sz)
    if p.kind == "sphere":
        return 4 * np.pi * p.extent[0] ** 2
    r, h = p.extent
    return 2 * np.pi * r * h


def _sample_local(p: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    if p.kind == "plane":
        sx, sy = p.extent
        u = rng.uniform(-0.5, 0.5, size=(n, 2)) * (sx, sy)
        return np.column_stack([u, np.zeros(n)])
    if p.kind == "box":
        sx, sy, sz = p.extent
        faces = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=n, p=faces / faces.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3)) * (sx, sy, sz)
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        u[np.arange(n), axis] = sign * np.array([sx, sy, sz])[axis]
        return u
    if p.kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * p.extent[0]
    r, h = p.extent
    theta = rng.uniform(0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h / 2, h / 2, size=n)])


def _rotate_yaw(pts: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T


def _inside(p: Primitive, pts: np.ndarray) -> np.ndarray:
    """Solid membership (boundary inclusive); planes have no interior."""
    local = _rotate_yaw(pts - np.asarray(p.center), -p.yaw)
    if p.kind == "box":
        return (np.abs(local) <= np.asarray(p.extent) / 2 + 1e-12).all(axis=1)
    if p.kind == "sphere":
        return np.linalg.norm(local, axis=1) <= p.extent[0] + 1e-12
    if p.kind == "cylinder":
        r, h = p.extent
        return (np.hypot(local[:, 0], local[:, 1]) <= r + 1e-12) & (np.abs(local[:, 2]) <= h / 2 + 1e-12)
    return np.zeros(len(pts), dtype=bool)


def class_colors(num_classes: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.uniform(0.1, 0.9, size=(num_classes + 1, 3))


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample every primitive at its density, jitter, then add labelled outliers.

    Point counts are round(area * density). A point lying inside a later solid
    primitive takes that primitive's label. Outliers carry ``spec.noise_label``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    coords, labels = [], []
    for p in spec.primitives:
        n = int(round(_area(p) * p.density))
        pts = _rotate_yaw(_sample_local(p, n, rng), p.yaw) + np.asarray(p.center, dtype=np.float64)
        coords.append(pts)
        labels.append(np.full(n, p.class_id, dtype=np.int64))
    for i, p in enumerate(spec.primitives):
        for later in spec.primitives[i + 1:]:
            inside = _inside(later, coords[i])
            labels[i][inside] = later.class_id
    pts = np.concatenate(coords) if coords else np.zeros((0, 3))
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    if spec.noise > 0 and len(pts):
        pts = pts + rng.normal(scale=spec.noise, size=pts.shape)
    if spec.outliers:
        if len(pts):
            lo, hi = pts.min(axis=0) - spec.outlier_spread, pts.max(axis=0) + spec.outlier_spread
        else:
            lo, hi = -np.full(3, spec.outlier_spread), np.full(3, spec.outlier_spread)
        out = rng.uniform(lo, hi, size=(spec.outliers, 3))
        pts = np.concatenate([pts, out])
        lab = np.concatenate([lab, np.full(spec.outliers, spec.noise_label, dtype=np.int64)])
    classes = spec.num_classes + (1 if spec.outliers else 0)
    feats = class_colors(spec.num_classes)[lab] if spec.color else None
    return PointCloud(pts, feats, lab, classes)


def toy_scene(num_points: int = 4096, seed: int = 0) -> PointCloud:
    """Plane / box / sphere scene with exactly ``num_points`` points.

    A floor plane (class 0) with a box (class 1) and a sphere (class 2)
    resting on it. Densities are scaled to the requested count; surplus
    points from rounding are dropped uniformly at random.
    """
    prims = [
        Primitive("plane", (0.0, 0.0, 0.0), (3.0, 2.0), 0, 1.0),
        Primitive("box", (-0.6, 0.0, 0.3), (0.6, 0.6, 0.6), 1, 1.0),
        Primitive("sphere", (0.8, 0.1, 0.4), (0.4,), 2, 1.0),
    ]
    area = sum(_area(p) for p in prims)
    density = 1.02 * num_points / area
    for p in prims:
        p.density = density
    cloud = generate_scene(SceneSpec(prims, num_classes=3, noise=0.002, seed=seed))
    if len(cloud) < num_points:
        raise DataError("toy scene under-filled")
    keep = np.sort(np.random.default_rng(seed + 1).choice(len(cloud), num_points, replace=False))
    return cloud.subset(keep)


# -- file formats ----------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(v, ".9g")


def write_cloud(path, cloud: PointCloud, fmt: str | None = None) -> None:
    """ASCII PLY or XYZ text. Coordinates use 9 significant digits."""
    path = Path(path)
    fmt = fmt or _format_for(path)
    n = len(cloud)
    has_rgb = cloud.feature_dim == 3
    rgb = np.clip(np.rint(cloud.features * 255), 0, 255).astype(int) if has_rgb else None
    lines = []
    if fmt == "ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {n}",
                  "property float x", "property float y", "property float z"]
        if has_rgb:
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        if cloud.labels is not None:
            lines.append("property int label")
        lines.append("end_header")
    for i in range(n):
        row = [_fmt(v) for v in cloud.coords[i]]
        if has_rgb:
            row += [str(v) for v in rgb[i]]
        if cloud.labels is not None:
            row.append(str(int(cloud.labels[i])))
        lines.append(" ".join(row))
    path.write_text("\n".join(lines) + "\n")


def _format_for(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise DataError(f"cannot infer point-cloud format from {path.name!r}; use .ply or .xyz")


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    fmt = fmt or _format_for(path)
    lines = path.read_text().splitlines()
    return _read_ply(lines, path) if fmt == "ply" else _read_xyz(lines, path)


def _parse_row(line: str, lineno: int, path: Path, width: int | None) -> list[float]:
    parts = line.split()
    if width is not None and len(parts) != width:
        raise DataError(f"{path}:{lineno}: expected {width} values, got {len(parts)}")
    try:
        return [float(v) for v in parts]
    except ValueError:
        raise DataError(f"{path}:{lineno}: malformed line {line!r}") from None


def _read_ply(lines: list[str], path: Path) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}:1: missing 'ply' magic")
    props: list[str] = []
    count = None
    in_vertex = False
    body = None
    for i, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise DataError(f"{path}:{i}: only ascii PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i
            break
    if body is None or count is None:
        raise DataError(f"{path}: incomplete PLY header")
    for axis in "xyz":
        if axis not in props:
            raise DataError(f"{path}: PLY vertex lacks property {axis}")
    known = {"x", "y", "z", "red", "green", "blue", "label"}
    for p in props:
        if p not in known:
            log.warning("%s: skipping unknown property %r", path, p)
    rows = []
    for j, line in enumerate(lines[body:body + count]):
        rows.append(_parse_row(line, body + j + 1, path, len(props)))
    if len(rows) != count:
        raise DataError(f"{path}: header declares {count} vertices, found {len(rows)}")
    data = np.array(rows, dtype=np.float64).reshape(count, len(props))
    col = {p: data[:, k] for k, p in enumerate(props)}
    coords = np.column_stack([col["x"], col["y"], col["z"]])
    feats = None
    if all(c in col for c in ("red", "green", "blue")):
        feats = np.column_stack([col["red"], col["green"], col["blue"]]) / 255.0
    labels = col["label"].astype(np.int64) if "label" in col else None
    return PointCloud(coords, feats, labels)


def _read_xyz(lines: list[str], path: Path) -> PointCloud:
    rows = []
    width = None
    for i, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = _parse_row(line, i, path, width)
        if width is None:
            if len(row) not in (3, 4, 6, 7):
                raise DataError(f"{path}:{i}: expected 3, 4, 6 or 7 columns, got {len(row)}")
            width = len(row)
        rows.append(row)
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    data = np.array(rows)
    feats = labels = None
    if width in (6, 7):
        feats = data[:, 3:6]
        # integer-valued colour columns are 0-255 bytes; fractional ones are already in [0, 1]
        if feats.max(initial=0.0) > 1.0 or np.all(feats == np.round(feats)):
            feats = feats / 255.0
    if width in (4, 7):
        lab = data[:, -1]
        if not np.all(lab == np.round(lab)):
            raise DataError(f"{path}: label column must hold integers")
        labels = lab.astype(np.int64)
    return PointCloud(data[:, :3], feats, labels)
