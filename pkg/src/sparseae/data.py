"""Ingestion: stroke files, point clouds, rasterization, augmentation, synthetic data."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSample, EmptyCloud, ParseError
from .sparse_tensor import SparseTensor


@dataclass
class StrokeSample:
    label: int
    strokes: list   # list of (k, 2) float arrays

    def points(self) -> np.ndarray:
        return np.concatenate(self.strokes) if self.strokes else np.zeros((0, 2))


@dataclass
class PointCloudSample:
    points: np.ndarray                  # (n, d)
    labels: np.ndarray | None = None    # (n,), -1 = unlabelled
    features: np.ndarray | None = None  # (n, c)

    @property
    def d(self) -> int:
        return self.points.shape[1]


# -- canonical stroke format -------------------------------------------------

def parse_strokes(text: str) -> list:
    """Parse ``<label>;x,y x,y|x,y ...`` records, one per line.

    Blank lines and lines starting with ``#`` are skipped.
    """
    samples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        label_part, sep, body = line.partition(";")
        if not sep:
            raise ParseError(lineno, "missing ';' after label")
        try:
            label = int(label_part)
        except ValueError:
            raise ParseError(lineno, f"bad label {label_part!r}") from None
        strokes = []
        for segment in body.split("|"):
            tokens = segment.split()
            if not tokens:
                raise ParseError(lineno, "empty stroke")
            pts = []
            for tok in tokens:
                xy = tok.split(",")
                if len(xy) != 2:
                    raise ParseError(lineno, f"bad point {tok!r}")
                try:
                    pts.append((float(xy[0]), float(xy[1])))
                except ValueError:
                    raise ParseError(lineno, f"bad point {tok!r}") from None
            strokes.append(np.array(pts, dtype=np.float64))
        samples.append(StrokeSample(label, strokes))
    return samples


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_strokes(samples) -> str:
    lines = []
    for s in samples:
        body = "|".join(" ".join(f"{_num(x)},{_num(y)}" for x, y in st) for st in s.strokes)
        lines.append(f"{s.label};{body}")
    return "\n".join(lines) + ("\n" if lines else "")


def convert_unipen(text: str) -> list:
    """Convert the UCI pen-digits "orig" (UNIPEN-style) files.

    Each ``.SEGMENT`` line starts a sample whose label is the last quoted
    token; ``.PEN_DOWN`` / ``.PEN_UP`` delimit strokes of ``x y`` lines.
    """
    samples, strokes, current, label = [], [], None, None

    def flush():
        if label is not None and strokes:
            samples.append(StrokeSample(label, [np.array(s, dtype=np.float64) for s in strokes]))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith(".SEGMENT"):
            flush()
            strokes, current = [], None
            quoted = re.findall(r'"([^"]*)"', line)
            try:
                label = int(quoted[-1]) if quoted else None
            except ValueError:
                raise ParseError(lineno, f"bad label in {line!r}") from None
        elif line.startswith(".PEN_DOWN"):
            current = []
        elif line.startswith(".PEN_UP"):
            if current:
                strokes.append(current)
            current = None
        elif current is not None and line and not line.startswith("."):
            parts = line.split()
            try:
                current.append((float(parts[0]), float(parts[1])))
            except (IndexError, ValueError):
                raise ParseError(lineno, f"bad point line {line!r}") from None
    flush()
    return samples


# -- rasterization ------------------------------------------------------------

def draw_line(p0, p1) -> np.ndarray:
    """Integer cells on the segment ``p0 -> p1`` (Bresenham, any dimension).

    Consecutive cells differ by at most one in every axis.
    """
    return _bresenham(np.asarray(p0, dtype=np.int64), np.asarray(p1, dtype=np.int64))


def _bresenham(p0, p1) -> np.ndarray:
    delta = p1 - p0
    steps = np.abs(delta)
    sign = np.sign(delta)
    drive = int(np.argmax(steps))
    n = int(steps[drive])
    cur = p0.copy()
    err = np.zeros(len(p0), dtype=np.int64)
    out = np.empty((n + 1, len(p0)), dtype=np.int64)
    out[0] = cur
    for i in range(1, n + 1):
        cur[drive] += sign[drive]
        for a in range(len(p0)):
            if a == drive:
                continue
            err[a] += 2 * steps[a]
            if err[a] > n:
                cur[a] += sign[a]
                err[a] -= 2 * n
        out[i] = cur
    return out


def normalize(sample: StrokeSample, grid: int) -> StrokeSample:
    """Scale (aspect preserving) and centre the strokes into ``[0, grid - 1]**2``."""
    pts = sample.points()
    if len(pts) == 0 or not np.all(np.isfinite(pts)):
        raise DegenerateSample("sample has no usable points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = (lo + hi) / 2
    extent = float((hi - lo).max())
    half = (grid - 1) / 2
    scale = (grid - 1) / extent if extent > 0 else 0.0
    strokes = [(s - centre) * scale + half for s in sample.strokes]
    return StrokeSample(sample.label, strokes)


def rasterize(sample: StrokeSample, grid: int, fit: bool = True) -> SparseTensor:
    """Draw the strokes on a ``grid x grid`` lattice, one channel of 1.0.

    With ``fit`` the strokes are first normalised into the grid; otherwise
    coordinates are used as given (rounded), and cells outside are dropped.
    """
    if grid < 8:
        raise DegenerateSample(f"grid must be at least 8, got {grid}")
    if fit:
        sample = normalize(sample, grid)
    cells = []
    for st in sample.strokes:
        q = np.rint(np.asarray(st)).astype(np.int64)
        cells.append(q[:1])
        for a, b in zip(q[:-1], q[1:]):
            cells.append(_bresenham(a, b))
    return _cells_to_tensor(np.concatenate(cells) if cells else np.zeros((0, 2), np.int64), (grid, grid))


def _cells_to_tensor(cells, size) -> SparseTensor:
    size_arr = np.asarray(size)
    inside = np.all((cells >= 0) & (cells < size_arr), axis=1)
    cells = np.unique(cells[inside], axis=0)
    coords = np.concatenate([np.zeros((len(cells), 1), np.int64), cells], axis=1)
    return SparseTensor.from_coords(coords, np.ones((len(cells), 1)), size, 1)


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AffineConfig:
    rotation: tuple = (-15.0, 15.0)     # degrees
    scale: tuple = (0.85, 1.15)
    shear: tuple = (0.0, 0.0)
    translation: float = 0.10           # fraction of extent, each axis
    horizontal_only: bool = False       # 3D: rotate about the last axis only

    @classmethod
    def identity(cls) -> "AffineConfig":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), 0.0)


def affine_matrix(config: AffineConfig, d: int, rng: np.random.Generator):
    """Random linear part and translation; rotation/shear act in the (0, 1) plane."""
    theta = math.radians(rng.uniform(*config.rotation))
    s = rng.uniform(*config.scale)
    sh = rng.uniform(*config.shear)
    c, n = math.cos(theta), math.sin(theta)
    A = np.eye(d)
    A[:2, :2] = np.array([[c, -n], [n, c]])
    if not config.horizontal_only:
        A[:2, :2] = A[:2, :2] @ np.array([[1.0, sh], [0.0, 1.0]])
    t = rng.uniform(-config.translation, config.translation, size=d)
    return A * s, t


def random_affine(sample, config: AffineConfig, seed):
    """Apply one random affine map (about the bounding-box centre).

    ``sample`` is a :class:`StrokeSample`, a :class:`PointCloudSample` or a
    point array; the same type comes back and labels are untouched.
    """
    rng = np.random.default_rng(seed)
    if isinstance(sample, StrokeSample):
        pts = sample.points()
    elif isinstance(sample, PointCloudSample):
        pts = sample.points
    else:
        pts = np.asarray(sample, dtype=np.float64)
    d = pts.shape[1]
    A, t = affine_matrix(config, d, rng)
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        centre, extent = (lo + hi) / 2, float((hi - lo).max())
    else:
        centre, extent = np.zeros(d), 0.0

    def apply(p):
        return (p - centre) @ A.T + centre + t * extent

    if isinstance(sample, StrokeSample):
        return StrokeSample(sample.label, [apply(s) for s in sample.strokes])
    if isinstance(sample, PointCloudSample):
        return PointCloudSample(apply(sample.points), sample.labels, sample.features)
    return apply(pts)


# -- point clouds ---------------------------------------------------------------

def parse_point_cloud(text: str) -> PointCloudSample:
    """Header ``d n_points n_features`` then ``coords.. features.. label`` lines."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError(1, "missing header")
    try:
        d, n, c = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError(1, f"bad header {lines[0]!r}") from None
    if len(lines) - 1 != n:
        raise ParseError(len(lines), f"expected {n} points, found {len(lines) - 1}")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != d + c + 1:
            raise ParseError(i, f"expected {d + c + 1} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(i, f"non-numeric value in {ln!r}") from None
    arr = np.array(rows, dtype=np.float64).reshape(n, d + c + 1)
    labels = arr[:, -1].astype(np.int64)
    return PointCloudSample(arr[:, :d], labels, arr[:, d:d + c] if c else None)


def format_point_cloud(sample: PointCloudSample) -> str:
    n, d = sample.points.shape
    c = 0 if sample.features is None else sample.features.shape[1]
    labels = sample.labels if sample.labels is not None else np.full(n, -1)
    out = [f"{d} {n} {c}"]
    for i in range(n):
        vals = [_num(v) for v in sample.points[i]]
        if c:
            vals += [repr(float(v)) for v in sample.features[i]]
        vals.append(str(int(labels[i])))
        out.append(" ".join(vals))
    return "\n".join(out) + "\n"


@dataclass
class Voxelized:
    tensor: SparseTensor
    site_labels: np.ndarray     # (#active,), -1 where no labelled point
    point_rows: np.ndarray      # (n_points,), row of each point's cell, -1 if dropped
    counts: np.ndarray          # points per active cell


def voxelize(sample: PointCloudSample, resolution: float, d: int | None = None,
             size=None, origin=None) -> Voxelized:
    """Bin points into cells of edge ``resolution``; features are cell means.

    The lattice origin defaults to the minimum corner of the cloud; with an
    explicit ``size`` points falling outside are dropped (row -1).
    """
    pts = np.asarray(sample.points, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloud("point cloud is empty")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    d = d or pts.shape[1]
    pts = pts[:, :d]
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    cells = np.floor((pts - origin) / resolution).astype(np.int64)
    if size is None:
        size = tuple(int(v) + 1 for v in cells.max(axis=0))
    size = tuple(size)
    inside = np.all((cells >= 0) & (cells < np.asarray(size)), axis=1)
    feats = sample.features if sample.features is not None else np.ones((len(pts), 1))
    feats = np.asarray(feats, dtype=np.float64)
    coords = np.concatenate([np.zeros((len(pts), 1), np.int64), cells], axis=1)
    from .sparse_tensor import keys_to_coords, linear_keys
    keys = linear_keys(coords[inside], size)
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.zeros((len(uniq), feats.shape[1]))
    np.add.at(sums, inv, feats[inside])
    counts = np.bincount(inv, minlength=len(uniq))
    tensor = SparseTensor(keys_to_coords(uniq, size), sums / counts[:, None], size, 1, uniq)
    point_rows = np.full(len(pts), -1, dtype=np.int64)
    point_rows[inside] = inv
    site_labels = np.full(len(uniq), -1, dtype=np.int64)
    if sample.labels is not None:
        labels = np.asarray(sample.labels)[inside]
        votes = {}
        for r, lab in zip(inv, labels):
            if lab >= 0:
                votes.setdefault(int(r), Counter())[int(lab)] += 1
        for r, ctr in votes.items():
            best = max(ctr.values())
            site_labels[r] = min(l for l, v in ctr.items() if v == best)
    return Voxelized(tensor, site_labels, point_rows, counts)


# -- synthetic data -----------------------------------------------------------

def synth_sparse(d: int, size: int, style: str = "polyline", seed=0, *, vertices: int = 3,
                 p: float = 0.1, classes: int = 2):
    """Deterministic labelled sparse structures.

    * ``polyline``: random polyline through ``vertices`` points; label = segment index mod ``classes``
    * ``shell``: hollow axis-aligned box; label = axis of the face a cell lies on
    * ``random``: Bernoulli(``p``) sites; label = ``pos[0] >= size/2``

    Returns ``(tensor, labels)`` with labels aligned to the tensor's rows.
    """
    rng = np.random.default_rng(seed)
    shape = (size,) * d
    if style == "polyline":
        verts = rng.integers(0, size, size=(vertices, d))
        cells, labs = [], []
        for i, (a, b) in enumerate(zip(verts[:-1], verts[1:])):
            seg = _bresenham(a, b)
            cells.append(seg)
            labs.append(np.full(len(seg), i % classes))
        cells = np.concatenate(cells)
        labs = np.concatenate(labs)
    elif style == "shell":
        lo = rng.integers(0, max(1, size // 3), size=d)
        hi = np.minimum(lo + rng.integers(max(2, size // 3), size, size=d), size - 1)
        grid = np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij"), -1)
        grid = grid.reshape(-1, d)
        on = (grid == lo) | (grid == hi)
        keep = on.any(axis=1)
        cells = grid[keep]
        labs = np.argmax(on[keep], axis=1) % classes
    elif style == "random":
        grid = np.stack(np.meshgrid(*[np.arange(size)] * d, indexing="ij"), -1).reshape(-1, d)
        keep = rng.random(len(grid)) < p
        cells = grid[keep]
        labs = (cells[:, 0] >= size / 2).astype(np.int64)
    else:
        raise ValueError(f"unknown style {style!r}")
    coords = np.concatenate([np.zeros((len(cells), 1), np.int64), cells], axis=1)
    # first label wins where segments cross
    from .sparse_tensor import linear_keys
    keys = linear_keys(coords, shape)
    uniq, first = np.unique(keys, return_index=True)
    t = SparseTensor(coords[first], np.ones((len(first), 1)), shape, 1, uniq)
    return t, np.asarray(labs)[first].astype(np.int64)


_DIGIT_TEMPLATES = {
    0: [[(0.5, 1.0), (0.15, 0.8), (0.1, 0.3), (0.5, 0.0), (0.9, 0.3), (0.85, 0.8), (0.5, 1.0)]],
    1: [[(0.3, 0.75), (0.55, 1.0), (0.55, 0.0)]],
    2: [[(0.1, 0.8), (0.45, 1.0), (0.85, 0.8), (0.8, 0.55), (0.1, 0.0), (0.9, 0.0)]],
    3: [[(0.1, 0.9), (0.8, 0.95), (0.4, 0.55), (0.85, 0.35), (0.6, 0.0), (0.1, 0.1)]],
    4: [[(0.7, 0.0), (0.7, 1.0), (0.05, 0.3), (0.95, 0.3)]],
    5: [[(0.85, 1.0), (0.2, 1.0), (0.15, 0.55), (0.7, 0.6), (0.85, 0.25), (0.5, 0.0), (0.1, 0.1)]],
    6: [[(0.8, 1.0), (0.2, 0.6), (0.15, 0.15), (0.5, 0.0), (0.85, 0.25), (0.5, 0.5), (0.2, 0.35)]],
    7: [[(0.1, 1.0), (0.9, 1.0), (0.35, 0.0)]],
    8: [[(0.5, 0.55), (0.15, 0.8), (0.5, 1.0), (0.85, 0.8), (0.5, 0.55), (0.1, 0.25),
         (0.5, 0.0), (0.9, 0.25), (0.5, 0.55)]],
    9: [[(0.85, 0.6), (0.5, 0.45), (0.15, 0.7), (0.5, 1.0), (0.85, 0.75), (0.8, 0.0)]],
}


def synth_digits(n: int, seed=0, jitter: float = 0.06) -> list:
    """Procedural handwritten-digit stand-ins: jittered, slanted stroke templates."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = int(rng.integers(0, 10))
        slant = rng.uniform(-0.25, 0.25)
        strokes = []
        for poly in _DIGIT_TEMPLATES[label]:
            p = np.array(poly, dtype=np.float64)
            p = p + rng.normal(0, jitter, size=p.shape)
            p[:, 0] += slant * p[:, 1]
            p[:, 0] *= rng.uniform(0.7, 1.1)
            strokes.append(_densify(p * 100.0, 8))
        out.append(StrokeSample(label, strokes))
    return out


def _densify(poly, k):
    """Insert ``k - 1`` points along each edge (a pen trace is densely sampled)."""
    pts = [poly[0]]
    for a, b in zip(poly[:-1], poly[1:]):
        for t in np.linspace(0, 1, k + 1)[1:]:
            pts.append(a + (b - a) * t)
    return np.array(pts)
