"""Sparse 2D BEV grids: active cell sets with per-cell feature vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extent must satisfy x_max > x_min and y_max > y_min")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell_size
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"{axis} extent is not an integer multiple of cell_size")

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_size))

    @property
    def shape(self) -> tuple[int, int]:
        return self.nx, self.ny

    @property
    def num_cells(self) -> int:
        return self.nx * self.ny

    def coarsen(self, factor: int = 2) -> "GridSpec":
        if self.nx % factor or self.ny % factor:
            raise ValueError(f"grid {self.nx}x{self.ny} is not divisible by {factor}")
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size * factor)

    def refine(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size / factor)

    def cell_centers(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices).reshape(-1, 2)
        return (indices + 0.5) * self.cell_size + np.array([self.x_min, self.y_min])

    def keys(self, indices: np.ndarray) -> np.ndarray:
        """Row-major linear keys ``i * ny + j``; sorting by key is the canonical order."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        return indices[:, 0] * self.ny + indices[:, 1]

    def in_bounds(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices).reshape(-1, 2)
        return (indices[:, 0] >= 0) & (indices[:, 0] < self.nx) & (indices[:, 1] >= 0) & (indices[:, 1] < self.ny)


class SparseGrid:
    """Active cells ``indices`` (N, 2) in row-major order with ``features`` (N, C).

    Arrays are read-only; operations return new grids.
    """

    __slots__ = ("spec", "indices", "features")

    def __init__(self, spec: GridSpec, indices, features, *, check: bool = True):
        indices = np.array(indices, dtype=np.int64).reshape(-1, 2)
        features = np.array(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(len(indices), -1) if len(indices) else features.reshape(0, 0)
        if check:
            if len(features) != len(indices):
                raise ValueError(f"{len(indices)} active cells but {len(features)} feature rows")
            if not np.all(spec.in_bounds(indices)):
                raise ValueError("active cell outside the grid")
            keys = spec.keys(indices)
            if len(keys) > 1 and not np.all(np.diff(keys) > 0):
                raise ValueError("active cells must be unique and in row-major order")
            if not np.all(np.isfinite(features)):
                raise ValueError("non-finite features")
        indices.setflags(write=False)
        features.setflags(write=False)
        self.spec = spec
        self.indices = indices
        self.features = features

    @classmethod
    def from_cells(cls, spec: GridSpec, indices, features) -> "SparseGrid":
        """Build from cells in any order (sorted here); duplicates are rejected."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(features, dtype=np.float64).reshape(len(indices), -1)
        order = np.argsort(spec.keys(indices), kind="stable")
        return cls(spec, indices[order], features[order])

    @classmethod
    def empty(cls, spec: GridSpec, channels: int) -> "SparseGrid":
        return cls(spec, np.zeros((0, 2), dtype=np.int64), np.zeros((0, channels)))

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self.spec.keys(self.indices)

    @property
    def density(self) -> float:
        return len(self) / self.spec.num_cells

    def __len__(self) -> int:
        return len(self.indices)

    def __repr__(self) -> str:
        return f"SparseGrid({self.spec.nx}x{self.spec.ny}, active={len(self)}, channels={self.channels})"

    def with_features(self, features: np.ndarray) -> "SparseGrid":
        return SparseGrid(self.spec, self.indices, features, check=False)

    def same_active(self, other: "SparseGrid") -> bool:
        return self.spec == other.spec and np.array_equal(self.indices, other.indices)

    def active_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.indices.tolist()))

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        """Row of each queried cell, or -1 when inactive / out of bounds."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        out = np.full(len(indices), -1, dtype=np.int64)
        ok = self.spec.in_bounds(indices)
        if not ok.any() or len(self) == 0:
            return out
        keys = self.keys
        q = self.spec.keys(indices[ok])
        pos = np.searchsorted(keys, q)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = keys[pos_c] == q
        out[np.flatnonzero(ok)[hit]] = pos_c[hit]
        return out


@dataclass(frozen=True)
class DenseGrid:
    spec: GridSpec
    features: np.ndarray  # (nx, ny, C)

    def __post_init__(self):
        if self.features.shape[:2] != self.spec.shape:
            raise ValueError(f"dense shape {self.features.shape[:2]} does not match grid {self.spec.shape}")


# --------------------------------------------------------------------------
# points -> cells


def point_to_cell(spec: GridSpec, point) -> tuple[int, int] | None:
    """Cell of a metric point, or None outside ``[x_min, x_max) x [y_min, y_max)``."""
    x, y = float(point[0]), float(point[1])
    if not (spec.x_min <= x < spec.x_max and spec.y_min <= y < spec.y_max):
        return None
    i = math.floor((x - spec.x_min) / spec.cell_size)
    j = math.floor((y - spec.y_min) / spec.cell_size)
    # guard the rounding of (x - x_min) / s right below an upper edge
    return min(i, spec.nx - 1), min(j, spec.ny - 1)


def points_to_cells(spec: GridSpec, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`point_to_cell`: (cell indices (N, 2), in-bounds mask)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    ok = (xy[:, 0] >= spec.x_min) & (xy[:, 0] < spec.x_max) & (xy[:, 1] >= spec.y_min) & (xy[:, 1] < spec.y_max)
    ij = np.floor((xy - np.array([spec.x_min, spec.y_min])) / spec.cell_size).astype(np.int64)
    ij[:, 0] = np.minimum(ij[:, 0], spec.nx - 1)
    ij[:, 1] = np.minimum(ij[:, 1], spec.ny - 1)
    return ij, ok


@dataclass(frozen=True)
class Occupancy:
    """Occupied cells of a cloud and the point -> cell row assignment."""

    indices: np.ndarray  # (M, 2) canonical order
    point_rows: np.ndarray  # (N,) row of each point's cell, -1 when dropped


def occupancy(spec: GridSpec, xy: np.ndarray) -> Occupancy:
    ij, ok = points_to_cells(spec, xy)
    rows = np.full(len(ij), -1, dtype=np.int64)
    if not ok.any():
        return Occupancy(np.zeros((0, 2), dtype=np.int64), rows)
    keys = spec.keys(ij[ok])
    uniq, inv = np.unique(keys, return_inverse=True)
    rows[ok] = inv
    cells = np.column_stack([uniq // spec.ny, uniq % spec.ny])
    return Occupancy(cells, rows)


def scatter_points(spec: GridSpec, cloud) -> dict[tuple[int, int], list[int]]:
    """Map each occupied cell to the ascending indices of its points."""
    xy = cloud.xy if hasattr(cloud, "xy") else cloud
    occ = occupancy(spec, xy)
    out: dict[tuple[int, int], list[int]] = {}
    for p, r in enumerate(occ.point_rows.tolist()):
        if r >= 0:
            out.setdefault(tuple(occ.indices[r].tolist()), []).append(p)
    return out


# --------------------------------------------------------------------------
# dense interchange


def to_dense(g: SparseGrid) -> DenseGrid:
    dense = np.zeros((g.spec.nx, g.spec.ny, g.channels))
    dense[g.indices[:, 0], g.indices[:, 1]] = g.features
    return DenseGrid(g.spec, dense)


def from_dense(d: DenseGrid, keep: Callable[[np.ndarray], np.ndarray] | None = None) -> SparseGrid:
    """Active cells are those where ``keep(features)`` holds (default: any nonzero channel).

    ``keep`` receives the (nx, ny, C) array and returns an (nx, ny) mask.
    """
    mask = np.any(d.features != 0, axis=-1) if keep is None else np.asarray(keep(d.features), dtype=bool)
    ii, jj = np.nonzero(mask)  # row-major already
    return SparseGrid(d.spec, np.column_stack([ii, jj]), d.features[ii, jj])


# --------------------------------------------------------------------------
# structural ops

_RING8 = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class PadMap:
    """Rows of the original cells inside the padded grid."""

    source_rows: np.ndarray


def voxel_pad_with_map(g: SparseGrid) -> tuple[SparseGrid, PadMap]:
    if len(g) == 0:
        return g, PadMap(np.zeros(0, dtype=np.int64))
    cand = (g.indices[:, None, :] + _RING8[None]).reshape(-1, 2)
    cand = cand[g.spec.in_bounds(cand)]
    keys = np.unique(g.spec.keys(cand))
    cells = np.column_stack([keys // g.spec.ny, keys % g.spec.ny])
    rows = np.searchsorted(keys, g.keys)
    feats = np.zeros((len(keys), g.channels))
    feats[rows] = g.features
    return SparseGrid(g.spec, cells, feats, check=False), PadMap(rows)


def voxel_pad(g: SparseGrid) -> SparseGrid:
    """Activate the 8-connected neighbours of every active cell with zero features."""
    return voxel_pad_with_map(g)[0]


@dataclass(frozen=True)
class PoolProvenance:
    """What :func:`max_pool2` saw: the fine grid's structure and the winners."""

    fine_spec: GridSpec
    fine_indices: np.ndarray  # pre-pool active set
    coarse_indices: np.ndarray  # post-pool active set
    parent: np.ndarray  # coarse row of every fine row
    argmax: np.ndarray  # (M_coarse, C) fine row that won each channel


def _group_max(values: np.ndarray, group: np.ndarray, ngroups: int) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise max of rows per group; ties go to the lowest row."""
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values reached max pooling")
    order = np.argsort(group, kind="stable")
    g_sorted = group[order]
    starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
    v_sorted = values[order]
    mx = np.maximum.reduceat(v_sorted, starts, axis=0)
    is_max = v_sorted == mx[np.searchsorted(starts, np.arange(len(order)), side="right") - 1]
    big = np.iinfo(np.int64).max
    cand = np.where(is_max, order[:, None], big)
    arg = np.minimum.reduceat(cand, starts, axis=0)
    out = np.empty((ngroups, values.shape[1]))
    out_arg = np.empty((ngroups, values.shape[1]), dtype=np.int64)
    gids = g_sorted[starts]
    out[gids] = mx
    out_arg[gids] = arg
    return out, out_arg


def max_pool2(g: SparseGrid) -> tuple[SparseGrid, PoolProvenance]:
    """2x2 stride-2 max-pool over occupied children only."""
    spec = g.spec
    if spec.nx % 2 or spec.ny % 2:
        raise ValueError(f"max_pool2 needs even grid dimensions, got {spec.nx}x{spec.ny}")
    coarse = spec.coarsen(2)
    if len(g) == 0:
        prov = PoolProvenance(spec, g.indices, g.indices, np.zeros(0, dtype=np.int64), np.zeros((0, g.channels), dtype=np.int64))
        return SparseGrid.empty(coarse, g.channels), prov
    parents = g.indices // 2
    pkeys = coarse.keys(parents)
    uniq, inv = np.unique(pkeys, return_inverse=True)
    feats, arg = _group_max(g.features, inv, len(uniq))
    cells = np.column_stack([uniq // coarse.ny, uniq % coarse.ny])
    out = SparseGrid(coarse, cells, feats, check=False)
    return out, PoolProvenance(spec, g.indices, cells, inv, arg)


def voxel_unpool(g: SparseGrid, provenance: PoolProvenance) -> SparseGrid:
    """Copy each coarse feature to every fine cell that pooled into it."""
    if provenance.fine_spec.coarsen(2) != g.spec:
        raise ValueError("unpool resolution does not match the pooling provenance")
    if not np.array_equal(g.indices, provenance.coarse_indices):
        raise ValueError("coarse active set does not match the pooling provenance")
    return SparseGrid(provenance.fine_spec, provenance.fine_indices, g.features[provenance.parent], check=False)


def cells_as_points(g: SparseGrid) -> tuple[np.ndarray, np.ndarray]:
    """Active cells as a point cloud: (metric centers (N, 2), features (N, C))."""
    return g.spec.cell_centers(g.indices), g.features
