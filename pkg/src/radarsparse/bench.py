"""Sparse-vs-dense cost accounting for the backbone.

Dense-equivalent MACs are what each layer would cost if every cell of its
grid were active (same kernel, same channels). The dense pipeline is timed by
running the same engine on a fully active grid.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .grid import SparseGrid
from .kpconv import KPConvGrid
from .model import Detector
from .nn import Linear, Module, record_timings
from .points import PointCloud
from .sparse_conv import SparseConv


@dataclass
class LayerStat:
    name: str
    kind: str
    pairs: int
    macs: int
    dense_macs: int
    seconds: float


@dataclass
class BenchReport:
    grid_cells: int
    active_cells: int
    layers: list[LayerStat] = field(default_factory=list)
    sparse_seconds: float = 0.0
    dense_seconds: float | None = None
    dense_measured_macs: int | None = None

    @property
    def density(self) -> float:
        return self.active_cells / self.grid_cells

    @property
    def macs(self) -> int:
        return sum(s.macs for s in self.layers)

    @property
    def dense_macs(self) -> int:
        return sum(s.dense_macs for s in self.layers)

    @property
    def mac_ratio(self) -> float:
        return self.macs / self.dense_macs if self.dense_macs else float("nan")

    def format(self) -> str:
        lines = [f"{'layer':<44} {'kind':<8} {'pairs':>10} {'macs':>14} {'dense_macs':>14} {'ms':>9}"]
        for s in self.layers:
            lines.append(f"{s.name:<44} {s.kind:<8} {s.pairs:>10d} {s.macs:>14d} {s.dense_macs:>14d} "
                         f"{1e3 * s.seconds:>9.3f}")
        lines.append(f"active_cells {self.active_cells} of {self.grid_cells} (density {self.density:.6f})")
        lines.append(f"sparse_macs {self.macs} dense_macs {self.dense_macs} ratio {self.mac_ratio:.6f}")
        lines.append(f"sparse_seconds {self.sparse_seconds:.6f}")
        if self.dense_seconds is None:
            lines.append("dense_seconds skipped (grid larger than --dense-max-cells)")
        else:
            lines.append(f"dense_seconds {self.dense_seconds:.6f} dense_measured_macs {self.dense_measured_macs}")
        return "\n".join(lines)


def named_modules(mod: Module, prefix: str = ""):
    yield prefix, mod
    for name, child in mod._children():
        if isinstance(child, Module):
            yield from named_modules(child, f"{prefix}.{name}" if prefix else name)


def _counted_layers(backbone: Module):
    out = []
    for name, m in named_modules(backbone):
        if isinstance(m, SparseConv):
            out.append((name, "ssc" if m.mode == "submanifold" else m.mode, m))
        elif isinstance(m, KPConvGrid):
            out.append((name, "kpconv", m))
        elif isinstance(m, Linear):
            out.append((name, "linear", m))
    return out


def _pairs(m) -> int:
    if isinstance(m, KPConvGrid):
        return m.conv.pairs
    if isinstance(m, Linear):
        return m.macs // (m.c_in * m.c_out)
    return m.pairs


def _timed_runs(backbone: Module, g: SparseGrid, repeat: int):
    totals, per_layer = [], []
    for _ in range(repeat):
        with record_timings() as t:
            backbone(g)
        totals.append(t[id(backbone)])
        per_layer.append(dict(t))
    return totals, per_layer


def full_grid(g: SparseGrid) -> SparseGrid:
    """Every cell active; occupied cells keep their features, the rest are zero."""
    spec = g.spec
    ii, jj = np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), indexing="ij")
    cells = np.column_stack([ii.ravel(), jj.ravel()])
    feats = np.zeros((spec.num_cells, g.channels))
    if len(g):
        feats[spec.keys(g.indices)] = g.features
    return SparseGrid(spec, cells, feats, check=False)


def bench(cfg: Config, cloud: PointCloud, repeat: int = 1, dense_max_cells: int = 16384) -> BenchReport:
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    model = Detector(cfg).eval()
    g = model.renderer(cfg.grid_spec(), cloud)
    layers = _counted_layers(model.backbone)
    totals, per_layer = _timed_runs(model.backbone, g, repeat)
    report = BenchReport(cfg.grid_spec().num_cells, len(g), sparse_seconds=statistics.median(totals))
    for name, kind, m in layers:
        secs = statistics.median(r.get(id(m), 0.0) for r in per_layer)
        report.layers.append(LayerStat(name, kind, _pairs(m), int(m.macs), int(m.dense_macs), secs))
    if report.grid_cells <= dense_max_cells:
        dense_totals, _ = _timed_runs(model.backbone, full_grid(g), repeat)
        report.dense_seconds = statistics.median(dense_totals)
        report.dense_measured_macs = sum(int(m.macs) for _, _, m in layers)
    return report
