"""Rulebook-driven sparse convolutions SC / SSC / DC and their dense oracles.

Geometry (cross-correlation): output cell ``b`` reads input cell
``s*b + d`` for every kernel offset ``d`` in ``[-p, f-1-p]^2`` with
``p = (f-1)//2``. Odd ``f`` centres the kernel; ``f=2`` gives the
non-overlapping 2x2 window used for stride-2 downsampling.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .grid import DenseGrid, GridSpec, SparseGrid
from .nn import Module, init_params

MODES = ("submanifold", "strided", "deconv")


@dataclass(frozen=True)
class ConvSpec:
    m: int
    n: int
    f: int
    s: int = 1

    def __post_init__(self):
        if min(self.m, self.n, self.f, self.s) < 1:
            raise ValueError(f"invalid conv spec {self}")

    @property
    def pad(self) -> int:
        return (self.f - 1) // 2

    def offsets(self) -> list[tuple[int, int]]:
        r = range(-self.pad, self.f - self.pad)
        return [(di, dj) for di in r for dj in r]


@dataclass(frozen=True)
class Rulebook:
    offsets: tuple[tuple[int, int], ...]
    in_rows: tuple[np.ndarray, ...]  # per offset
    out_rows: tuple[np.ndarray, ...]  # per offset, aligned with in_rows
    in_spec: GridSpec
    in_indices: np.ndarray
    out_spec: GridSpec
    out_indices: np.ndarray

    @property
    def num_pairs(self) -> int:
        return int(sum(len(r) for r in self.in_rows))

    def pairs(self) -> set[tuple[int, int, int, int, int, int]]:
        """All pairs as (di, dj, in_i, in_j, out_i, out_j) cell tuples."""
        out = set()
        for (di, dj), a, b in zip(self.offsets, self.in_rows, self.out_rows):
            for ca, cb in zip(self.in_indices[a].tolist(), self.out_indices[b].tolist()):
                out.add((di, dj, ca[0], ca[1], cb[0], cb[1]))
        return out


def _lookup(spec: GridSpec, sorted_keys: np.ndarray, cells: np.ndarray) -> np.ndarray:
    out = np.full(len(cells), -1, dtype=np.int64)
    ok = spec.in_bounds(cells)
    if not ok.any() or len(sorted_keys) == 0:
        return out
    q = spec.keys(cells[ok])
    pos = np.minimum(np.searchsorted(sorted_keys, q), len(sorted_keys) - 1)
    hit = sorted_keys[pos] == q
    out[np.flatnonzero(ok)[hit]] = pos[hit]
    return out


def _strided_outputs(spec: GridSpec, cells: np.ndarray, conv: ConvSpec, out_spec: GridSpec) -> np.ndarray:
    s = conv.s
    cand = []
    for di, dj in conv.offsets():
        num = cells - np.array([di, dj])
        ok = np.all(num % s == 0, axis=1)
        b = num[ok] // s
        cand.append(b[out_spec.in_bounds(b)])
    if not cand or sum(len(c) for c in cand) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    keys = np.unique(out_spec.keys(np.concatenate(cand)))
    return np.column_stack([keys // out_spec.ny, keys % out_spec.ny])


def _gather_pairs(in_spec, in_indices, out_indices, conv):
    in_keys = in_spec.keys(in_indices)
    offs, ins, outs = [], [], []
    for di, dj in conv.offsets():
        a = _lookup(in_spec, in_keys, out_indices * conv.s + np.array([di, dj]))
        hit = np.flatnonzero(a >= 0)
        offs.append((di, dj))
        ins.append(a[hit])
        outs.append(hit)
    return offs, ins, outs


def build_rulebook(active_in, spec: GridSpec, conv: ConvSpec, mode: str = "submanifold",
                   reference_out: SparseGrid | tuple[GridSpec, np.ndarray] | None = None) -> Rulebook:
    """Gather/scatter pairs for one convolution.

    ``active_in`` are the input cells in canonical order (for ``deconv``
    these are the coarse cells; they are re-derived from ``reference_out``
    and validated by the caller).
    """
    if mode not in MODES:
        raise ValueError(f"unknown rulebook mode {mode!r}")
    active_in = np.asarray(active_in, dtype=np.int64).reshape(-1, 2)
    if mode == "submanifold":
        if conv.s != 1 or conv.f % 2 == 0:
            raise ValueError("submanifold convolution needs odd f and stride 1")
        offs, ins, outs = _gather_pairs(spec, active_in, active_in, conv)
        return Rulebook(tuple(offs), tuple(ins), tuple(outs), spec, active_in, spec, active_in)
    if mode == "strided":
        out_spec = spec.coarsen(conv.s) if conv.s > 1 else spec
        out_cells = _strided_outputs(spec, active_in, conv, out_spec)
        offs, ins, outs = _gather_pairs(spec, active_in, out_cells, conv)
        return Rulebook(tuple(offs), tuple(ins), tuple(outs), spec, active_in, out_spec, out_cells)
    if reference_out is None:
        raise ValueError("deconv rulebook needs the active set of the matching strided convolution")
    ref_spec, ref_cells = ((reference_out.spec, reference_out.indices) if isinstance(reference_out, SparseGrid)
                           else reference_out)
    fwd = build_rulebook(ref_cells, ref_spec, conv, "strided")
    if fwd.out_spec != spec:
        raise ValueError(f"deconv input grid {spec.shape} does not match the reference's "
                         f"downsampled grid {fwd.out_spec.shape}")
    return Rulebook(fwd.offsets, fwd.out_rows, fwd.in_rows, fwd.out_spec, fwd.out_indices,
                    fwd.in_spec, fwd.in_indices)


class _RulebookCache:
    """Small LRU keyed on the active set; layers on one grid share rulebooks."""

    def __init__(self, size: int = 32):
        self.size = size
        self._d: OrderedDict = OrderedDict()

    def get(self, key, build):
        if key in self._d:
            self._d.move_to_end(key)
            return self._d[key]
        val = build()
        self._d[key] = val
        if len(self._d) > self.size:
            self._d.popitem(last=False)
        return val


_CACHE = _RulebookCache()


def _cached_rulebook(indices, spec, conv, mode, reference=None):
    geo = ConvSpec(1, 1, conv.f, conv.s)
    ref_key = None
    if reference is not None:
        ref_key = (reference.spec, reference.indices.tobytes())
    key = (mode, geo, spec, indices.tobytes(), ref_key)
    return _CACHE.get(key, lambda: build_rulebook(indices, spec, geo, mode, reference))


class SparseConv(Module):
    """Sparse convolution layer in one of three modes.

    ``submanifold``: SSC(m, n, f), output active set = input active set.
    ``strided``: SC(m, n, f, s), output where the footprint touches input.
    ``deconv``: DC(m, n, f, s), reverses a matching SC; needs its input grid.
    """

    def __init__(self, m: int, n: int, f: int = 3, s: int = 1, mode: str = "submanifold", seed=0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "submanifold" and (s != 1 or f % 2 == 0):
            raise ValueError("SSC needs odd f and s = 1")
        self.spec = ConvSpec(m, n, f, s)
        self.mode = mode
        rng = np.random.default_rng(seed)
        self.weight = init_params((f * f, n, m), f * f * m, rng)
        self.bias = init_params((n,), f * f * m, rng)
        self.pairs = 0
        self.macs = 0
        self.dense_macs = 0

    def forward(self, g: SparseGrid, reference: SparseGrid | None = None) -> SparseGrid:
        m, n, f, s = self.spec.m, self.spec.n, self.spec.f, self.spec.s
        if g.channels != m:
            raise ValueError(f"conv expects {m} input channels, got {g.channels}")
        if self.mode == "deconv":
            if reference is None:
                raise ValueError("deconvolution needs the reference (pre-downsample) grid")
            rb = _cached_rulebook(g.indices, g.spec, self.spec, "deconv", reference)
            if not np.array_equal(rb.in_indices, g.indices):
                raise ValueError("deconv input active set does not match the reference's downsampled set")
        else:
            rb = _cached_rulebook(g.indices, g.spec, self.spec, self.mode)
        out = np.tile(self.bias.value, (len(rb.out_indices), 1))
        x = g.features
        W = self.weight.value
        for k, (a, b) in enumerate(zip(rb.in_rows, rb.out_rows)):
            if len(a):
                out[b] += x[a] @ W[k].T
        self._cache = (rb, x)
        self.pairs = rb.num_pairs
        self.macs = self.pairs * m * n
        # a dense layer touches every coarse-side cell with the full kernel
        coarse = rb.in_spec if self.mode == "deconv" else rb.out_spec
        self.dense_macs = coarse.num_cells * f * f * m * n
        return SparseGrid(rb.out_spec, rb.out_indices, out, check=False)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        rb, x = self._cache
        W = self.weight.value
        dx = np.zeros_like(x)
        self.bias.grad += dout.sum(axis=0)
        for k, (a, b) in enumerate(zip(rb.in_rows, rb.out_rows)):
            if len(a):
                self.weight.grad[k] += dout[b].T @ x[a]
                dx[a] += dout[b] @ W[k]
        return dx


def ssc_forward(layer: SparseConv, g: SparseGrid) -> SparseGrid:
    if layer.mode != "submanifold":
        raise ValueError("ssc_forward needs a submanifold layer")
    return layer.forward(g)


def sc_forward(layer: SparseConv, g: SparseGrid) -> SparseGrid:
    if layer.mode != "strided":
        raise ValueError("sc_forward needs a strided layer")
    return layer.forward(g)


def dc_forward(layer: SparseConv, g: SparseGrid, reference: SparseGrid) -> SparseGrid:
    if layer.mode != "deconv":
        raise ValueError("dc_forward needs a deconv layer")
    return layer.forward(g, reference)


# --------------------------------------------------------------------------
# dense oracles


def _weights_of(layer):
    if isinstance(layer, SparseConv):
        return layer.weight.value, layer.bias.value, layer.spec
    return layer  # (weight, bias, ConvSpec)


def dense_conv_oracle(dense: DenseGrid, layer) -> DenseGrid:
    """Zero-padded strided cross-correlation over the full dense grid."""
    W, b, conv = _weights_of(layer)
    x = dense.features
    nx, ny, m = x.shape
    s, p, f = conv.s, conv.pad, conv.f
    out_spec = dense.spec.coarsen(s) if s > 1 else dense.spec
    ox, oy = out_spec.shape
    xp = np.zeros((nx + f, ny + f, m))
    xp[p:p + nx, p:p + ny] = x
    out = np.broadcast_to(b, (ox, oy, len(b))).copy()
    for k, (di, dj) in enumerate(conv.offsets()):
        win = xp[p + di: p + di + s * ox: s, p + dj: p + dj + s * oy: s]
        out += win @ W[k].T
    return DenseGrid(out_spec, out)


def dense_deconv_oracle(dense: DenseGrid, layer, fine_spec: GridSpec) -> DenseGrid:
    """Transposed strided correlation: fine[s*b + d] += W_d coarse[b]."""
    W, b, conv = _weights_of(layer)
    x = dense.features
    s, p, f = conv.s, conv.pad, conv.f
    nx, ny = fine_spec.shape
    out = np.zeros((nx + f + s, ny + f + s, W.shape[1]))
    cx, cy = x.shape[:2]
    for k, (di, dj) in enumerate(conv.offsets()):
        out[p + di: p + di + s * cx: s, p + dj: p + dj + s * cy: s] += x @ W[k].T
    return DenseGrid(fine_spec, out[p:p + nx, p:p + ny] + b)


def footprint_occupancy(spec: GridSpec, indices: np.ndarray, conv: ConvSpec) -> np.ndarray:
    """Dense mask of strided outputs whose kernel footprint holds an active input."""
    occ = np.zeros(spec.shape + (1,))
    occ[indices[:, 0], indices[:, 1]] = 1.0
    ones = (np.ones((conv.f * conv.f, 1, 1)), np.zeros(1), ConvSpec(1, 1, conv.f, conv.s))
    return dense_conv_oracle(DenseGrid(spec, occ), ones).features[..., 0] > 0
