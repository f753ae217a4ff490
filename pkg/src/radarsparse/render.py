"""Grid rendering: sparse PointPillars, sparse KPBEV and their multigrid sum."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import GridSpec, SparseGrid, _group_max, occupancy
from .kpconv import KPConv, place_kernel_points
from .nn import BatchNorm, Linear, Module, ReLU
from .points import NeighborIndex, PointCloud

RENDER_MODES = ("spp", "skpbev", "skpp")


class SPPEncoder(Module):
    """Per-point (dx, dy, vr, rcs) -> linear -> BN -> ReLU, max over each pillar.

    dx, dy are offsets from the pillar's cell centre; BN statistics run over
    the points of the frame.
    """

    def __init__(self, f_out: int, seed=0):
        if f_out < 1:
            raise ValueError("f_out must be >= 1")
        rng = np.random.default_rng(seed)
        self.linear = Linear(4, f_out, rng)
        self.bn = BatchNorm(f_out)
        self.relu = ReLU()
        self.f_out = f_out

    @staticmethod
    def point_features(spec: GridSpec, cloud: PointCloud):
        occ = occupancy(spec, cloud.xy)
        keep = occ.point_rows >= 0
        rows = occ.point_rows[keep]
        centers = spec.cell_centers(occ.indices)[rows]
        data = cloud.data[keep]
        feats = np.column_stack([data[:, :2] - centers, data[:, 2], data[:, 3]])
        return occ, rows, feats

    def forward(self, spec: GridSpec, cloud: PointCloud) -> SparseGrid:
        occ, rows, feats = self.point_features(spec, cloud)
        self._n_points = len(feats)
        if len(occ.indices) == 0:
            self._argmax = None
            return SparseGrid.empty(spec, self.f_out)
        h = self.relu(self.bn(self.linear(feats)))
        pooled, self._argmax = _group_max(h, rows, len(occ.indices))
        return SparseGrid(spec, occ.indices, pooled, check=False)

    def backward(self, dgrid: np.ndarray) -> None:
        if self._argmax is None:
            return None
        dh = np.zeros((self._n_points, self.f_out))
        cols = np.broadcast_to(np.arange(self.f_out), self._argmax.shape)
        np.add.at(dh, (self._argmax, cols), dgrid)
        self.linear.backward(self.bn.backward(self.relu.backward(dh)))
        return None


class SKPBEVEncoder(Module):
    """KPConv at every occupied cell centre over the raw points within the radius.

    Neighbourhoods cross cell borders, so a point can feed several cells.
    Point features are (vr, rcs), or (x, y, vr, rcs) with ``use_coords``.
    """

    def __init__(self, f_out: int, K: int = 15, radius: float = 1.5, sigma: float | None = None,
                 use_coords: bool = False, seed=0):
        rng = np.random.default_rng(seed)
        kernel = place_kernel_points(K, radius, seed=int(rng.integers(2**31)), sigma=sigma)
        self.use_coords = use_coords
        self.conv = KPConv(kernel, 4 if use_coords else 2, f_out, seed=rng)
        self.f_out = f_out

    def forward(self, spec: GridSpec, cloud: PointCloud) -> SparseGrid:
        occ = occupancy(spec, cloud.xy)
        if len(occ.indices) == 0:
            return SparseGrid.empty(spec, self.f_out)
        refs = spec.cell_centers(occ.indices)
        r = self.conv.kernel.radius
        nbrs = NeighborIndex(cloud.xy, r).query_batch(refs, r)
        feats = cloud.data if self.use_coords else cloud.data[:, 2:]
        out = self.conv.forward(refs, cloud.xy, feats, nbrs)
        return SparseGrid(spec, occ.indices, out, check=False)

    def backward(self, dgrid: np.ndarray) -> None:
        if len(dgrid):
            self.conv.backward(dgrid)
        return None


class MultigridAggregator(Module):
    """f = sum_m BN_m(f_m) over renderings that share one active set."""

    def __init__(self, members: int, channels: int):
        if members < 1:
            raise ValueError("need at least one member")
        self.bns = [BatchNorm(channels) for _ in range(members)]

    def forward(self, grids: list[SparseGrid]) -> SparseGrid:
        if len(grids) != len(self.bns):
            raise ValueError(f"expected {len(self.bns)} member grids, got {len(grids)}")
        first = grids[0]
        for g in grids[1:]:
            if not g.same_active(first):
                raise ValueError("multigrid members must share the same active set")
            if g.channels != first.channels:
                raise ValueError("multigrid members must share the channel count")
        if len(first) == 0:
            return first
        total = sum(bn(g).features for bn, g in zip(self.bns, grids))
        return first.with_features(total)

    def backward(self, d: np.ndarray) -> list[np.ndarray]:
        if len(d) == 0:
            return [d for _ in self.bns]
        return [bn.backward(d) for bn in self.bns]


def spp_encode(spec: GridSpec, cloud: PointCloud, encoder: SPPEncoder) -> SparseGrid:
    return encoder(spec, cloud)


def skpbev_encode(spec: GridSpec, cloud: PointCloud, encoder: SKPBEVEncoder) -> SparseGrid:
    return encoder(spec, cloud)


def multigrid_aggregate(members: list[SparseGrid], aggregator: MultigridAggregator) -> SparseGrid:
    return aggregator(members)


def skpp_encode(spec, cloud, spp_encoder, skpbev_encoder, aggregator) -> SparseGrid:
    return aggregator([spp_encoder(spec, cloud), skpbev_encoder(spec, cloud)])


class Renderer(Module):
    """Point cloud -> sparse grid with ``f_out`` channels, in one of three modes."""

    def __init__(self, mode: str, f_out: int = 32, K: int = 15, radius: float = 1.5,
                 sigma: float | None = None, use_coords: bool = False, seed=0):
        if mode not in RENDER_MODES:
            raise ValueError(f"unknown rendering mode {mode!r}; expected one of {RENDER_MODES}")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.f_out = f_out
        if mode in ("spp", "skpp"):
            self.spp = SPPEncoder(f_out, seed=rng)
        if mode in ("skpbev", "skpp"):
            self.skpbev = SKPBEVEncoder(f_out, K, radius, sigma, use_coords, seed=rng)
        if mode == "skpp":
            self.aggregator = MultigridAggregator(2, f_out)

    def forward(self, spec: GridSpec, cloud: PointCloud) -> SparseGrid:
        if self.mode == "spp":
            return self.spp(spec, cloud)
        if self.mode == "skpbev":
            return self.skpbev(spec, cloud)
        return self.aggregator([self.spp(spec, cloud), self.skpbev(spec, cloud)])

    def backward(self, d: np.ndarray) -> None:
        if self.mode == "spp":
            self.spp.backward(d)
        elif self.mode == "skpbev":
            self.skpbev.backward(d)
        else:
            d_spp, d_kp = self.aggregator.backward(d)
            self.spp.backward(d_spp)
            self.skpbev.backward(d_kp)


# --------------------------------------------------------------------------
# debug dumps


def dump_grid(g: SparseGrid, path: str | Path) -> None:
    """``# grid nx ny cell_size x_min y_min channels active`` header, then ``i j f0 f1 ...``."""
    s = g.spec
    lines = [f"# grid {s.nx} {s.ny} {s.cell_size!r} {s.x_min!r} {s.y_min!r} {g.channels} {len(g)}"]
    for (i, j), f in zip(g.indices.tolist(), g.features.tolist()):
        lines.append(" ".join([str(i), str(j)] + [repr(v) for v in f]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_grid_dump(path: str | Path) -> SparseGrid:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[:2] != ["#", "grid"]:
        raise ValueError(f"{path}: not a grid dump")
    nx, ny = int(head[2]), int(head[3])
    cs, x0, y0, ch = float(head[4]), float(head[5]), float(head[6]), int(head[7])
    spec = GridSpec(x0, x0 + nx * cs, y0, y0 + ny * cs, cs)
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    idx = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    feats = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(-1, ch)
    return SparseGrid(spec, idx, feats)
