"""Radar point clouds: data model, radius search, synthetic scenes and CSV IO."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .boxes import OBB

CSV_HEADER = ("frame", "x", "y", "vr", "rcs")


class ParseError(ValueError):
    """Malformed point file. Carries the 1-based data row and column name."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class RadarPoint(NamedTuple):
    x: float
    y: float
    vr: float
    rcs: float


class PointCloud:
    """Immutable set of radar reflections stored column-wise as (x, y, vr, rcs)."""

    __slots__ = ("_data", "frame_count")

    def __init__(self, data, frame_count: int = 1):
        arr = np.array(data, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(arr)):
            raise ValueError("point fields must be finite")
        if int(frame_count) < 1:
            raise ValueError("frame_count must be >= 1")
        arr.setflags(write=False)
        self._data = arr
        self.frame_count = int(frame_count)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]], frame_count: int = 1) -> "PointCloud":
        return cls(np.asarray(points, dtype=np.float64).reshape(-1, 4), frame_count)

    @classmethod
    def from_xy(cls, xy, vr=None, rcs=None, frame_count: int = 1) -> "PointCloud":
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        n = len(xy)
        vr = np.zeros(n) if vr is None else np.asarray(vr, dtype=np.float64)
        rcs = np.zeros(n) if rcs is None else np.asarray(rcs, dtype=np.float64)
        return cls(np.column_stack([xy, vr, rcs]), frame_count)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def xy(self) -> np.ndarray:
        return self._data[:, :2]

    @property
    def vr(self) -> np.ndarray:
        return self._data[:, 2]

    @property
    def rcs(self) -> np.ndarray:
        return self._data[:, 3]

    def __len__(self) -> int:
        return len(self._data)

    def __getitem__(self, i: int) -> RadarPoint:
        return RadarPoint(*map(float, self._data[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame_count == other.frame_count and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, frame_count={self.frame_count})"

    def with_rcs(self, rcs: np.ndarray) -> "PointCloud":
        data = self._data.copy()
        data[:, 3] = rcs
        return PointCloud(data, self.frame_count)

    def translated(self, dx: float, dy: float) -> "PointCloud":
        data = self._data.copy()
        data[:, 0] += dx
        data[:, 1] += dy
        return PointCloud(data, self.frame_count)


# --------------------------------------------------------------------------
# neighbor search


def _check_radius(radius: float) -> None:
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")


def brute_force_neighbors(cloud: PointCloud | np.ndarray, center, radius: float) -> list[int]:
    """Linear scan; closed ball. Reference semantics for :func:`radius_neighbors`."""
    _check_radius(radius)
    xy = cloud.xy if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 2)
    out = []
    cx, cy = float(center[0]), float(center[1])
    r2 = radius * radius
    for i in range(len(xy)):
        dx = xy[i, 0] - cx
        dy = xy[i, 1] - cy
        if dx * dx + dy * dy <= r2:
            out.append(i)
    return out


_BUCKET_OFFSET = 1 << 30


class NeighborIndex:
    """Spatial hash of 2D points with square buckets of side ``cell``.

    Buckets are kept as a sorted key array plus a permutation, so a query
    over a 3x3 bucket block is a handful of binary searches. Queries with
    radius up to ``cell`` are exact. The bucket side carries a little slack
    over ``cell`` so that the block anchored at ``floor((c - r) / side)``
    also holds points whose rounded distance lands exactly on ``r``.
    """

    _SLACK = 1e-6

    def __init__(self, xy: np.ndarray, cell: float):
        _check_radius(cell)
        self.xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        self.cell = float(cell)
        self.side = self.cell * (1 + self._SLACK)
        b = np.floor(self.xy / self.side).astype(np.int64) + _BUCKET_OFFSET
        keys = b[:, 0] * (2 * _BUCKET_OFFSET) + b[:, 1]
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def buckets(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for key, idx in zip(self.keys.tolist(), self.order.tolist()):
            bx, by = divmod(key, 2 * _BUCKET_OFFSET)
            out.setdefault((int(bx) - _BUCKET_OFFSET, int(by) - _BUCKET_OFFSET), []).append(idx)
        return out

    def query_batch(self, centers: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """CSR neighborhoods: ``indices[ptr[m]:ptr[m+1]]`` are the ascending
        point indices within ``radius`` of ``centers[m]``."""
        _check_radius(radius)
        if radius > self.cell * (1 + 1e-12):
            raise ValueError(f"query radius {radius} exceeds index cell {self.cell}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        m = len(centers)
        if m == 0 or len(self.xy) == 0:
            return np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        reach = radius * (1 + 1e-9)
        cb = np.floor((centers - reach) / self.side).astype(np.int64) + _BUCKET_OFFSET
        d = np.array([0, 1, 2], dtype=np.int64)
        bx = (cb[:, 0][:, None, None] + d[None, :, None]).repeat(3, axis=2)
        by = (cb[:, 1][:, None, None] + d[None, None, :]).repeat(3, axis=1)
        qkeys = (bx * (2 * _BUCKET_OFFSET) + by).reshape(m, 9)
        lo = np.searchsorted(self.keys, qkeys, side="left").ravel()
        hi = np.searchsorted(self.keys, qkeys, side="right").ravel()
        counts = hi - lo
        total = int(counts.sum())
        qid = np.repeat(np.repeat(np.arange(m), 9), counts)
        starts = np.repeat(lo - (np.cumsum(counts) - counts), counts)
        cand = self.order[np.arange(total) + starts]
        diff = self.xy[cand] - centers[qid]
        keep = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] <= radius * radius
        qid, cand = qid[keep], cand[keep]
        srt = np.lexsort((cand, qid))
        qid, cand = qid[srt], cand[srt]
        ptr = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(qid, minlength=m), out=ptr[1:])
        return ptr, cand


def radius_neighbors(cloud: PointCloud | np.ndarray, center, radius: float,
                     index: NeighborIndex | None = None) -> list[int]:
    """Indices of points within ``radius`` (inclusive) of ``center``, ascending."""
    _check_radius(radius)
    xy = cloud.xy if isinstance(cloud, PointCloud) else cloud
    if index is None:
        index = NeighborIndex(xy, radius)
    _, idx = index.query_batch(np.asarray(center, dtype=np.float64).reshape(1, 2), radius)
    return idx.tolist()


def radius_neighbors_batch(xy: np.ndarray, centers: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """CSR radius search of many centers against ``xy``."""
    return NeighborIndex(xy, radius).query_batch(centers, radius)


# --------------------------------------------------------------------------
# augmentation and synthetic scenes


def augment_rcs(cloud: PointCloud, sigma: float, seed: int | np.random.Generator) -> PointCloud:
    """Add N(0, sigma^2) noise to every RCS value."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return cloud.with_rcs(cloud.rcs + rng.normal(0.0, sigma, size=len(cloud)))


CLASS_NAMES = ("car", "vru")


@dataclass(frozen=True)
class SceneObject:
    box: OBB
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: str = "car"

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ValueError(f"unknown class '{self.class_id}'")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    clutter_count: int = 0
    points_per_object: int = 20
    seed: int = 0
    extent: tuple[float, float, float, float] = (-60.0, 60.0, -60.0, 60.0)
    jitter: float = 0.05
    rcs_mean: dict = field(default_factory=lambda: {"car": 10.0, "vru": 0.0, "clutter": -5.0})
    rcs_std: float = 3.0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = []
        for o in d.get("objects", []):
            b = o["box"]
            objs.append(SceneObject(OBB(*map(float, b)) if isinstance(b, (list, tuple)) else OBB(**b),
                                    tuple(map(float, o.get("velocity", (0.0, 0.0)))),
                                    o.get("class", o.get("class_id", "car"))))
        kw = {k: d[k] for k in ("clutter_count", "points_per_object", "seed", "jitter", "rcs_std") if k in d}
        if "extent" in d:
            kw["extent"] = tuple(map(float, d["extent"]))
        return cls(objects=tuple(objs), **kw)

    def to_dict(self) -> dict:
        return {
            "objects": [{"box": [o.box.cx, o.box.cy, o.box.w, o.box.l, o.box.yaw],
                         "velocity": list(o.velocity), "class": o.class_id} for o in self.objects],
            "clutter_count": self.clutter_count,
            "points_per_object": self.points_per_object,
            "seed": self.seed,
            "extent": list(self.extent),
        }


def _perimeter_samples(box: OBB, n: int, rng: np.random.Generator) -> np.ndarray:
    corners = box.corners()
    edges = np.roll(corners, -1, axis=0) - corners
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    s = rng.uniform(0.0, lengths.sum(), size=n)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, 3)
    t = (s - cum[k]) / lengths[k]
    return corners[k] + t[:, None] * edges[k]


def synth_scene(spec: SceneSpec) -> tuple[PointCloud, list[tuple[str, OBB]]]:
    """Sample a radar frame: reflections on object perimeters plus uniform clutter.

    Returns the cloud and the ground truth as ``(class_name, box)`` pairs.
    """
    x0, x1, y0, y1 = spec.extent
    for o in spec.objects:
        c = o.box.corners()
        if c[:, 0].min() < x0 or c[:, 0].max() >= x1 or c[:, 1].min() < y0 or c[:, 1].max() >= y1:
            raise ValueError(f"object {o.box} lies outside the extent {spec.extent}")
    rng = np.random.default_rng(spec.seed)
    rows = []
    for o in spec.objects:
        p = _perimeter_samples(o.box, spec.points_per_object, rng)
        p = p + rng.uniform(-spec.jitter, spec.jitter, size=p.shape)
        norm = np.hypot(p[:, 0], p[:, 1])
        radial = np.divide(p, norm[:, None], out=np.zeros_like(p), where=norm[:, None] > 0)
        vr = radial @ np.asarray(o.velocity, dtype=np.float64)
        rcs = rng.normal(spec.rcs_mean[o.class_id], spec.rcs_std, size=len(p))
        rows.append(np.column_stack([p, vr, rcs]))
    if spec.clutter_count:
        cx = rng.uniform(x0, x1, size=spec.clutter_count)
        cy = rng.uniform(y0, y1, size=spec.clutter_count)
        rcs = rng.normal(spec.rcs_mean["clutter"], spec.rcs_std, size=spec.clutter_count)
        rows.append(np.column_stack([cx, cy, np.zeros(spec.clutter_count), rcs]))
    data = np.concatenate(rows) if rows else np.zeros((0, 4))
    gt = [(o.class_id, o.box.canonical()) for o in spec.objects]
    return PointCloud(data), gt


# --------------------------------------------------------------------------
# CSV


def load_points_csv(path: str | Path) -> PointCloud:
    """Read a ``frame,x,y,vr,rcs`` file. Rows are numbered from 1 after the header."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected header 'frame,x,y,vr,rcs'") from None
        header = [h.strip() for h in header]
        for col in CSV_HEADER:
            if col not in header:
                raise ParseError(f"missing column '{col}' in header", row=0, column=col)
        pos = {col: header.index(col) for col in CSV_HEADER}
        frames, rows = [], []
        for rownum, rec in enumerate(reader, start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            vals = []
            for col in CSV_HEADER:
                k = pos[col]
                if k >= len(rec):
                    raise ParseError("missing field", row=rownum, column=col)
                try:
                    v = float(rec[k])
                except ValueError:
                    raise ParseError(f"non-numeric value {rec[k]!r}", row=rownum, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {rec[k]!r}", row=rownum, column=col)
                vals.append(v)
            if vals[0] != int(vals[0]):
                raise ParseError(f"frame must be an integer, got {rec[pos['frame']]!r}", row=rownum, column="frame")
            frames.append(int(vals[0]))
            rows.append(vals[1:])
    frame_count = 1 + max(frames) - min(frames) if frames else 1
    return PointCloud(np.asarray(rows, dtype=np.float64).reshape(-1, 4), frame_count)


def save_points_csv(cloud: PointCloud, path: str | Path, frames: Sequence[int] | None = None) -> None:
    frames = [0] * len(cloud) if frames is None else list(frames)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for f, (x, y, vr, rcs) in zip(frames, cloud.data.tolist()):
            fh.write(f"{f},{x!r},{y!r},{vr!r},{rcs!r}\n")
