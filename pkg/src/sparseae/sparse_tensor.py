"""Sparse tensors: a sorted active-site index plus one feature row per site.

Coordinates are stored as an integer array of shape ``(#active, 1 + d)``
whose first column is the batch index.  Rows are kept in lexicographic
``(batch, pos)`` order, which is also the order of the row-major linear
key of each site, so lookups reduce to ``np.searchsorted``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, DuplicateSite, OutOfRange, TooLarge

DENSE_LIMIT = 10**8


class Coordinate(NamedTuple):
    batch: int
    pos: tuple


def linear_keys(coords: np.ndarray, spatial_size: Sequence[int]) -> np.ndarray:
    """Row-major linear key of each ``(batch, pos)`` row."""
    coords = np.asarray(coords, dtype=np.int64)
    key = coords[:, 0].copy()
    for i, s in enumerate(spatial_size):
        key = key * int(s) + coords[:, i + 1]
    return key


def keys_to_coords(keys: np.ndarray, spatial_size: Sequence[int]) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    d = len(spatial_size)
    out = np.empty((len(keys), d + 1), dtype=np.int64)
    rest = keys.copy()
    for i in range(d - 1, -1, -1):
        s = int(spatial_size[i])
        out[:, i + 1] = rest % s
        rest //= s
    out[:, 0] = rest
    return out


class SparseTensor:
    """Immutable sparse tensor.

    ``coords`` must already be sorted and duplicate free; use :func:`build`
    or :meth:`from_coords` when that is not known to hold.
    """

    __slots__ = ("coords", "features", "spatial_size", "batch_size", "_keys")

    def __init__(self, coords, features, spatial_size, batch_size=None, keys=None):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(spatial_size) + 1)
        self.features = features
        self.spatial_size = tuple(int(s) for s in spatial_size)
        if batch_size is None:
            batch_size = int(self.coords[:, 0].max()) + 1 if len(self.coords) else 1
        self.batch_size = int(batch_size)
        self._keys = keys

    @classmethod
    def from_coords(cls, coords, features, spatial_size, batch_size=None):
        """Sort rows canonically; duplicates raise :class:`DuplicateSite`."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(spatial_size) + 1)
        features = np.asarray(features)
        _check_range(coords, spatial_size, batch_size)
        keys = linear_keys(coords, spatial_size)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise DuplicateSite("duplicate active site")
        return cls(coords[order], features[order], spatial_size, batch_size, keys)

    @property
    def d(self) -> int:
        return len(self.spatial_size)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def n_active(self) -> int:
        return len(self.coords)

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = linear_keys(self.coords, self.spatial_size)
        return self._keys

    def lookup(self, coords) -> np.ndarray:
        """Row numbers of ``coords`` (shape ``(k, 1 + d)``); -1 where inactive."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d + 1)
        rows = np.full(len(coords), -1, dtype=np.int64)
        size = np.asarray(self.spatial_size)
        inside = np.all((coords[:, 1:] >= 0) & (coords[:, 1:] < size), axis=1)
        inside &= (coords[:, 0] >= 0) & (coords[:, 0] < self.batch_size)
        if not inside.any() or self.n_active == 0:
            return rows
        q = linear_keys(coords[inside], self.spatial_size)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, self.n_active - 1)
        hit = self.keys[pos_c] == q
        sub = np.where(hit, pos_c, -1)
        rows[inside] = sub
        return rows

    def index(self, coord) -> int | None:
        """Row of a single site, or None."""
        coord = _as_row(coord, self.d)
        r = int(self.lookup(coord[None])[0])
        return None if r < 0 else r

    def with_features(self, features) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.spatial_size, self.batch_size, self._keys)

    def same_sites(self, other: "SparseTensor") -> bool:
        return (self.spatial_size == other.spatial_size
                and self.coords.shape == other.coords.shape
                and bool(np.array_equal(self.coords, other.coords)))

    def site_set(self) -> set:
        return {tuple(int(v) for v in row) for row in self.coords}

    def __repr__(self):
        return (f"SparseTensor(d={self.d}, size={self.spatial_size}, batch={self.batch_size}, "
                f"active={self.n_active}, channels={self.features.shape[1]})")


@dataclass(frozen=True)
class DenseTensor:
    """Dense ``(batch, channels, *spatial)`` array; used as a test oracle."""

    values: np.ndarray

    @property
    def d(self) -> int:
        return self.values.ndim - 2

    @property
    def spatial_size(self) -> tuple:
        return tuple(self.values.shape[2:])

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def _as_row(coord, d) -> np.ndarray:
    if isinstance(coord, Coordinate):
        return np.array((coord.batch, *coord.pos), dtype=np.int64)
    coord = tuple(coord)
    if len(coord) == d:
        return np.array((0, *coord), dtype=np.int64)
    if len(coord) == d + 1:
        return np.array(coord, dtype=np.int64)
    raise DimensionMismatch(f"coordinate {coord} has wrong length for d={d}")


def _check_range(coords, spatial_size, batch_size=None):
    if len(coords) == 0:
        return
    size = np.asarray(spatial_size)
    bad = np.any((coords[:, 1:] < 0) | (coords[:, 1:] >= size), axis=1) | (coords[:, 0] < 0)
    if batch_size is not None:
        bad |= coords[:, 0] >= batch_size
    if bad.any():
        raise OutOfRange(f"site {coords[np.argmax(bad)].tolist()} outside {tuple(spatial_size)}")


def build(d: int, spatial_size: Sequence[int], channels: int,
          sites: Iterable, batch_size: int | None = None,
          dtype=np.float64) -> SparseTensor:
    """Build a tensor from ``(coordinate, feature_row)`` pairs.

    A coordinate is either a :class:`Coordinate`, a ``d``-tuple (batch 0) or a
    ``(batch, *pos)`` tuple.
    """
    if not 2 <= d <= 4:
        raise DimensionMismatch(f"d must be in 2..4, got {d}")
    if len(spatial_size) != d:
        raise DimensionMismatch("spatial_size length differs from d")
    rows, feats = [], []
    for coord, feat in sites:
        rows.append(_as_row(coord, d))
        feat = np.asarray(feat, dtype=dtype).reshape(-1)
        if feat.shape[0] != channels:
            raise DimensionMismatch(f"feature row of length {feat.shape[0]}, expected {channels}")
        feats.append(feat)
    coords = np.array(rows, dtype=np.int64).reshape(-1, d + 1)
    features = np.array(feats, dtype=dtype).reshape(-1, channels)
    return SparseTensor.from_coords(coords, features, spatial_size, batch_size)


def empty(spatial_size, channels, batch_size=1, dtype=np.float64) -> SparseTensor:
    d = len(spatial_size)
    return SparseTensor(np.zeros((0, d + 1), np.int64), np.zeros((0, channels), dtype),
                        spatial_size, batch_size)


def to_dense(t: SparseTensor, limit: int = DENSE_LIMIT) -> DenseTensor:
    total = t.batch_size * t.channels * int(np.prod(t.spatial_size))
    if total > limit:
        raise TooLarge(f"{total} scalars exceeds the dense limit of {limit}")
    values = np.zeros((t.batch_size, t.channels, *t.spatial_size), dtype=np.asarray(t.features).dtype)
    if t.n_active:
        idx = (t.coords[:, 0], slice(None), *(t.coords[:, i + 1] for i in range(t.d)))
        # advanced indices separated by a slice put the site axis first
        values[idx] = t.features
    return DenseTensor(values)


def from_dense(x: DenseTensor) -> SparseTensor:
    v = np.asarray(x.values)
    moved = np.moveaxis(v, 1, -1)  # (batch, *spatial, channels)
    active = np.any(moved != 0, axis=-1)
    coords = np.argwhere(active).astype(np.int64)
    features = moved[active]
    return SparseTensor(coords, features, v.shape[2:], v.shape[0])


def occupancy(t: SparseTensor) -> float:
    return t.n_active / (t.batch_size * int(np.prod(t.spatial_size)))


def concat_batch(tensors: Sequence[SparseTensor]) -> SparseTensor:
    """Stack single-sample tensors into one minibatch tensor (batch = position)."""
    if not tensors:
        raise ValueError("no tensors to batch")
    size = tensors[0].spatial_size
    coords, feats = [], []
    offset = 0
    for t in tensors:
        if t.spatial_size != size:
            raise DimensionMismatch("cannot batch tensors of different spatial size")
        c = t.coords.copy()
        c[:, 0] += offset
        coords.append(c)
        feats.append(t.features)
        offset += t.batch_size
    return SparseTensor(np.concatenate(coords), np.concatenate(feats), size, offset)


def split_batch(t: SparseTensor) -> list:
    out = []
    bounds = np.searchsorted(t.coords[:, 0], np.arange(t.batch_size + 1))
    for b in range(t.batch_size):
        lo, hi = bounds[b], bounds[b + 1]
        c = t.coords[lo:hi].copy()
        c[:, 0] = 0
        out.append(SparseTensor(c, t.features[lo:hi], t.spatial_size, 1))
    return out
