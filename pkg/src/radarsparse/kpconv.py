"""Kernel point convolution in 2D with linear kernel-point influence."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import SparseGrid, cells_as_points
from .nn import Module, Parameter, init_params
from .points import NeighborIndex


@dataclass(frozen=True)
class KernelPointSet:
    positions: np.ndarray  # (K, 2), relative to the reference point
    radius: float
    influence_sigma: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(pos) < 1:
            raise ValueError("need at least one kernel point")
        if not self.radius > 0 or not self.influence_sigma > 0:
            raise ValueError("radius and influence_sigma must be positive")
        if np.any(np.hypot(pos[:, 0], pos[:, 1]) > self.radius * (1 + 1e-12)):
            raise ValueError("kernel points must lie within the convolution radius")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def size(self) -> int:
        return len(self.positions)


def place_kernel_points(K: int, radius: float, seed: int = 0, sigma: float | None = None,
                        iterations: int = 100) -> KernelPointSet:
    """One point at the origin, the rest spread by repulsion inside the disk.

    The K-1 outer points start on a ring of radius 0.7*radius (seeded phase)
    and follow ``iterations`` steps of normalised pairwise 1/d repulsion
    against a weak quadratic pull toward the origin, projected back onto
    the disk after every step.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    sigma = radius / 2 if sigma is None else sigma
    if K == 1:
        return KernelPointSet(np.zeros((1, 2)), radius, sigma)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi)
    ang = phase + 2 * math.pi * np.arange(K - 1) / (K - 1)
    pts = np.zeros((K, 2))
    pts[1:] = 0.7 * radius * np.column_stack([np.cos(ang), np.sin(ang)])
    step0 = 0.05 * radius
    for it in range(iterations):
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = (diff ** 2).sum(-1) + np.eye(K)
        force = (diff / d2[..., None] ** 1.5).sum(axis=1)
        # without the pull every point ends up on the rim
        force -= pts / (radius ** 3) * (K - 1) * 1.5
        force[0] = 0.0
        norm = np.linalg.norm(force, axis=1, keepdims=True)
        move = np.divide(force, norm, out=np.zeros_like(force), where=norm > 0)
        pts += step0 * (1 - it / iterations) * move
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = np.where(r > radius, pts * (radius / np.maximum(r, 1e-300)), pts)
    return KernelPointSet(pts, radius, sigma)


def influence(kernel: KernelPointSet, offsets) -> np.ndarray:
    """h[p, k] = max(0, 1 - |offset_p - x_k| / sigma)."""
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    d = np.linalg.norm(off[:, None, :] - kernel.positions[None, :, :], axis=-1)
    h = np.maximum(0.0, 1.0 - d / kernel.influence_sigma)
    return h if np.ndim(offsets) > 1 else h[0]


class KPConv(Module):
    """out_m = bias + sum_{n in N(m)} sum_k h_k(p_n - p_m) W_k f_n."""

    _buffers = ("kernel_positions",)

    def __init__(self, kernel: KernelPointSet, c_in: int, c_out: int, seed=0, normalize: bool = False):
        rng = np.random.default_rng(seed)
        self.kernel = kernel
        fan_in = kernel.size * c_in
        self.weight = init_params((kernel.size, c_out, c_in), fan_in, rng)
        self.bias = init_params((c_out,), fan_in, rng)
        self.normalize = normalize
        self.macs = 0
        self.pairs = 0
        self.live = 0

    # positions are frozen but still travel with checkpoints
    @property
    def kernel_positions(self) -> np.ndarray:
        return self.kernel.positions

    def _set_buffer(self, name, value):
        if name == "kernel_positions":
            self.kernel = KernelPointSet(value, self.kernel.radius, self.kernel.influence_sigma)
        else:
            super()._set_buffer(name, value)

    @property
    def c_in(self) -> int:
        return self.weight.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, ref_xy, support_xy, support_feats, neighbors: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        ref_xy = np.asarray(ref_xy, dtype=np.float64).reshape(-1, 2)
        support_xy = np.asarray(support_xy, dtype=np.float64).reshape(-1, 2)
        feats = np.asarray(support_feats, dtype=np.float64)
        feats = feats.reshape(len(support_xy), feats.shape[-1] if feats.ndim == 2 else -1)
        if feats.shape[1] != self.c_in:
            raise ValueError(f"kpconv expects {self.c_in} input channels, got {feats.shape[1]}")
        ptr, idx = neighbors
        M, N, K = len(ref_xy), len(support_xy), self.kernel.size
        if len(ptr) != M + 1:
            raise ValueError("neighbor lists do not match the reference count")
        counts = np.diff(ptr)
        ref_of = np.repeat(np.arange(M), counts)
        offsets = support_xy[idx] - ref_xy[ref_of]
        dist = np.hypot(offsets[:, 0], offsets[:, 1])
        if len(dist) and dist.max() > self.kernel.radius * (1 + 1e-9):
            bad = int(np.argmax(dist))
            raise ValueError(f"neighbor {int(idx[bad])} of reference {int(ref_of[bad])} lies "
                             f"{dist[bad]:.6g} from it, outside radius {self.kernel.radius}")
        h = influence(self.kernel, offsets) if len(offsets) else np.zeros((0, K))
        if self.normalize:
            h = h / np.maximum(counts[ref_of], 1)[:, None]
        rows = (ref_of[:, None] * K + np.arange(K)[None, :]).ravel()
        cols = np.repeat(idx, K)
        A = sp.csr_matrix((h.ravel(), (rows, cols)), shape=(M * K, N))
        A.eliminate_zeros()
        agg = (A @ feats).reshape(M, K, self.c_in)
        # (reference, kernel point) rows with no support in range stay zero; skip them
        live = (np.diff(A.indptr) > 0).reshape(M, K)
        live_rows = [np.flatnonzero(live[:, k]) for k in range(K)]
        out = np.tile(self.bias.value, (M, 1))
        W = self.weight.value
        for k, r in enumerate(live_rows):
            if len(r):
                out[r] += agg[r, k] @ W[k].T
        self._cache = (A, agg, live_rows)
        self.pairs = len(idx)
        self.live = int(live.sum())
        self.macs = A.nnz * self.c_in + self.live * self.c_in * self.c_out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        A, agg, live_rows = self._cache
        W = self.weight.value
        dagg = np.zeros_like(agg)
        for k, r in enumerate(live_rows):
            if len(r):
                self.weight.grad[k] += dout[r].T @ agg[r, k]
                dagg[r, k] = dout[r] @ W[k]
        self.bias.grad += dout.sum(axis=0)
        return np.asarray(A.T @ dagg.reshape(-1, self.c_in))


def kpconv_forward(layer: KPConv, ref_xy, support_xy, support_feats, neighbors) -> np.ndarray:
    return layer.forward(ref_xy, support_xy, support_feats, neighbors)


def grid_neighborhoods(g: SparseGrid, radius: float, coord_scale: float = 1.0):
    """Active-cell pseudo points (scaled) and their CSR radius neighborhoods."""
    centers, _ = cells_as_points(g)
    xy = centers * coord_scale
    if len(xy) == 0:
        return xy, (np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return xy, NeighborIndex(xy, radius).query_batch(xy, radius)


class KPConvGrid(Module):
    """KPConv over the active cells of a grid, seen as a point cloud.

    With ``radius_units="meters"`` offsets are metric, so a fixed radius
    covers fewer cells at coarser resolutions; with ``"cells"`` offsets are
    measured in cells of the current grid.
    """

    def __init__(self, kernel: KernelPointSet, c_in: int, c_out: int, seed=0,
                 radius_units: str = "meters", normalize: bool = False):
        if radius_units not in ("meters", "cells"):
            raise ValueError(f"radius_units must be 'meters' or 'cells', got {radius_units!r}")
        self.conv = KPConv(kernel, c_in, c_out, seed=seed, normalize=normalize)
        self.radius_units = radius_units
        self.dense_macs = 0

    def neighborhoods(self, g: SparseGrid):
        scale = 1.0 if self.radius_units == "meters" else 1.0 / g.spec.cell_size
        return grid_neighborhoods(g, self.conv.kernel.radius, scale)

    def forward(self, g: SparseGrid, neighborhoods=None) -> SparseGrid:
        xy, nbrs = self.neighborhoods(g) if neighborhoods is None else neighborhoods
        out = self.conv.forward(xy, xy, g.features, nbrs)
        self.dense_macs = self._dense_macs(g)
        return SparseGrid(g.spec, g.indices, out, check=False)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.conv.backward(dout)

    def _dense_macs(self, g: SparseGrid) -> int:
        """MACs of the same layer with every cell of the grid active.

        Counts, like the sparse path, only nonzero influences and only
        (cell, kernel point) rows that see at least one in-bounds cell.
        """
        kern = self.conv.kernel
        unit = g.spec.cell_size if self.radius_units == "meters" else 1.0
        r = kern.radius / unit
        nx, ny = g.spec.shape
        R = int(math.floor(r + 1e-9))
        di = np.arange(-R, R + 1)
        DI, DJ = np.meshgrid(di, di, indexing="ij")
        disk = DI ** 2 + DJ ** 2 <= r * r * (1 + 1e-9) ** 2
        ox, oy = DI[disk], DJ[disk]
        cover = np.clip(nx - np.abs(ox), 0, None) * np.clip(ny - np.abs(oy), 0, None)
        h = influence(kern, np.column_stack([ox, oy]) * unit)
        if h.ndim == 1:
            h = h[None, :]
        hit = h > 0
        agg = int((cover[:, None] * hit).sum())
        live = 0
        for k in range(kern.size):
            mask = np.zeros((nx, ny), dtype=bool)
            for a, b in zip(ox[hit[:, k]], oy[hit[:, k]]):
                mask[max(0, -a):min(nx, nx - a), max(0, -b):min(ny, ny - b)] = True
            live += int(mask.sum())
        ci, co = self.conv.c_in, self.conv.c_out
        return agg * ci + live * ci * co

    @property
    def macs(self) -> int:
        return self.conv.macs


def kpconv_on_grid(layer: KPConvGrid, g: SparseGrid) -> SparseGrid:
    return layer.forward(g)
