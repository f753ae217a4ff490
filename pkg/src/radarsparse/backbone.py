"""DPVC and SSCN blocks, and the encoder / FPN-decoder backbone built from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import PoolProvenance, SparseGrid, max_pool2, voxel_pad_with_map, voxel_unpool
from .kpconv import KPConvGrid, place_kernel_points
from .nn import BatchNorm, Linear, Module, ReLU, Sequential
from .sparse_conv import SparseConv

BLOCK_TYPES = ("dpvc", "sscn")


@dataclass
class BackboneCfg:
    encoder_channels: list[int] = field(default_factory=lambda: [72, 96, 128, 146, 160])
    block_type: str = "dpvc"
    decoder_channels: int = 64
    head_levels: list[int] = field(default_factory=lambda: [2, 1])
    kp_radius: float = 3.75
    kp_K: int = 15
    kp_sigma: float | None = None
    radius_units: str = "meters"
    dpvc_placement: str = "figure"
    branch_norm: str = "bn"

    def __post_init__(self):
        if len(self.encoder_channels) < 2:
            raise ValueError("backbone needs at least 2 stages")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if any(c < 1 for c in self.encoder_channels) or self.decoder_channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.head_levels or any(not 0 <= k < len(self.encoder_channels) for k in self.head_levels):
            raise ValueError("head levels must index encoder stages")
        if self.dpvc_placement not in ("figure", "text"):
            raise ValueError("dpvc_placement must be 'figure' or 'text'")
        if self.branch_norm not in ("bn", "l2"):
            raise ValueError("branch_norm must be 'bn' or 'l2'")

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)


def _l2_forward(x: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return x / norm, norm


def _l2_backward(y: np.ndarray, norm: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm


class DPVCBlock(Module):
    """Voxel padding, then an SSC branch and a KPConv branch summed on the padded set.

    ``placement="figure"``: each conv is followed by BN + ReLU and each
    branch ends in one more BN. ``"text"``: the SSC branch runs both convs
    back to back before its BN + ReLU + BN; the KPConv branch is unchanged.
    ``branch_norm="l2"`` replaces the final per-branch BN with per-cell L2
    normalisation.
    """

    def __init__(self, m: int, n: int, kp_radius: float = 3.75, K: int = 15, sigma: float | None = None,
                 radius_units: str = "meters", placement: str = "figure", branch_norm: str = "bn", seed=0):
        rng = np.random.default_rng(seed)
        ssc1, ssc2 = SparseConv(m, n, 3, seed=rng), SparseConv(n, n, 3, seed=rng)
        last = [BatchNorm(n)] if branch_norm == "bn" else []
        if placement == "figure":
            self.ssc_branch = Sequential(ssc1, BatchNorm(n), ReLU(), ssc2, BatchNorm(n), ReLU(), *last)
        else:
            self.ssc_branch = Sequential(ssc1, ssc2, BatchNorm(n), ReLU(), *last)
        kern1 = place_kernel_points(K, kp_radius, seed=int(rng.integers(2**31)), sigma=sigma)
        kern2 = place_kernel_points(K, kp_radius, seed=int(rng.integers(2**31)), sigma=sigma)
        self.kp1 = KPConvGrid(kern1, m, n, seed=rng, radius_units=radius_units)
        self.kp_bn1 = BatchNorm(n)
        self.kp2 = KPConvGrid(kern2, n, n, seed=rng, radius_units=radius_units)
        self.kp_tail = Sequential(BatchNorm(n), ReLU(), *[BatchNorm(n) for _ in last])
        self.relu = ReLU()
        self.m, self.n = m, n
        self.branch_norm = branch_norm

    def forward(self, g: SparseGrid) -> SparseGrid:
        if g.channels != self.m:
            raise ValueError(f"DPVC block expects {self.m} channels, got {g.channels}")
        gp, pad = voxel_pad_with_map(g)
        a = self.ssc_branch(gp)
        nbrs = self.kp1.neighborhoods(gp)
        b = self.kp1(gp, nbrs)
        b = self.relu(self.kp_bn1(b))
        b = self.kp_tail(self.kp2(b, nbrs))
        self._pad = pad
        if self.branch_norm == "l2":
            ya, na = _l2_forward(a.features)
            yb, nb = _l2_forward(b.features)
            self._l2 = (ya, na, yb, nb)
            return gp.with_features(ya + yb)
        return gp.with_features(a.features + b.features)

    def backward(self, d: np.ndarray) -> np.ndarray:
        if self.branch_norm == "l2":
            ya, na, yb, nb = self._l2
            da, db = _l2_backward(ya, na, d), _l2_backward(yb, nb, d)
        else:
            da = db = d
        dgp = self.ssc_branch.backward(da)
        db = self.kp_tail.backward(db)
        db = self.kp2.backward(db)
        db = self.kp_bn1.backward(self.relu.backward(db))
        dgp = dgp + self.kp1.backward(db)
        return dgp[self._pad.source_rows]


class SSCNBlock(Sequential):
    """Pre-activated pair (BN -> ReLU -> SSC(., ., 3)) x 2; active set unchanged."""

    def __init__(self, m: int, n: int, seed=0):
        rng = np.random.default_rng(seed)
        super().__init__(BatchNorm(m), ReLU(), SparseConv(m, n, 3, seed=rng),
                         BatchNorm(n), ReLU(), SparseConv(n, n, 3, seed=rng))
        self.m, self.n = m, n

    def forward(self, g: SparseGrid) -> SparseGrid:
        if g.channels != self.m:
            raise ValueError(f"SSCN block expects {self.m} channels, got {g.channels}")
        return super().forward(g)


def dpvc_block(block: DPVCBlock, g: SparseGrid) -> SparseGrid:
    return block(g)


def sscn_block(block: SSCNBlock, g: SparseGrid) -> SparseGrid:
    return block(g)


def pool_backward(prov: PoolProvenance, d_coarse: np.ndarray) -> np.ndarray:
    d_fine = np.zeros((len(prov.fine_indices), d_coarse.shape[1]))
    cols = np.broadcast_to(np.arange(d_coarse.shape[1]), prov.argmax.shape)
    np.add.at(d_fine, (prov.argmax, cols), d_coarse)
    return d_fine


def unpool_backward(prov: PoolProvenance, d_fine: np.ndarray) -> np.ndarray:
    d_coarse = np.zeros((len(prov.coarse_indices), d_fine.shape[1]))
    np.add.at(d_coarse, prov.parent, d_fine)
    return d_coarse


class Encoder(Module):
    def __init__(self, in_channels: int, cfg: BackboneCfg, seed=0):
        rng = np.random.default_rng(seed)
        chans = [in_channels] + list(cfg.encoder_channels)
        blocks = []
        for k in range(cfg.stages):
            if cfg.block_type == "dpvc":
                blocks.append(DPVCBlock(chans[k], chans[k + 1], cfg.kp_radius, cfg.kp_K, cfg.kp_sigma,
                                        cfg.radius_units, cfg.dpvc_placement, cfg.branch_norm, seed=rng))
            else:
                blocks.append(SSCNBlock(chans[k], chans[k + 1], seed=rng))
        self.blocks = blocks
        self.cfg = cfg

    def forward(self, g: SparseGrid) -> tuple[list[SparseGrid], list[PoolProvenance]]:
        L = self.cfg.stages
        f = 2 ** (L - 1)
        if g.spec.nx % f or g.spec.ny % f:
            raise ValueError(f"grid {g.spec.nx}x{g.spec.ny} is not divisible by 2^{L - 1} for {L} stages")
        outs, provs = [], []
        x = g
        for k, block in enumerate(self.blocks):
            x = block(x)
            outs.append(x)
            if k < L - 1:
                x, prov = max_pool2(x)
                provs.append(prov)
        self._provs = provs
        return outs, provs

    def backward(self, d_outs: list[np.ndarray | None]) -> np.ndarray:
        d = None
        for k in reversed(range(self.cfg.stages)):
            dk = d_outs[k]
            if k < self.cfg.stages - 1 and d is not None:
                up = pool_backward(self._provs[k], d)
                dk = up if dk is None else dk + up
            if dk is None:
                d = None
                continue
            d = self.blocks[k].backward(dk)
        return d


class FPNDecoder(Module):
    """Top-down path: unpool, add a 1x1 lateral projection, one SSCN block per level.

    DPVC padding grows a stage's active set beyond what the previous pool
    produced, so the coarser map is first restricted to the pooled cells.
    """

    def __init__(self, cfg: BackboneCfg, seed=0):
        rng = np.random.default_rng(seed)
        L, D = cfg.stages, cfg.decoder_channels
        self.lowest = min(cfg.head_levels)
        self.top = Linear(cfg.encoder_channels[-1], D, seed=rng)
        self.laterals = {str(k): Linear(cfg.encoder_channels[k], D, seed=rng) for k in range(self.lowest, L - 1)}
        self.blocks = {str(k): SSCNBlock(D, D, seed=rng) for k in range(self.lowest, L - 1)}
        self.cfg = cfg

    def forward(self, enc: list[SparseGrid], provs: list[PoolProvenance]) -> dict[int, SparseGrid]:
        L = self.cfg.stages
        if len(enc) != L or len(provs) != L - 1:
            raise ValueError("encoder outputs and provenance do not match the stage count")
        x = self.top(enc[-1])
        maps = {L - 1: x}
        self._restrict = {}
        for k in range(L - 2, self.lowest - 1, -1):
            rows = x.lookup(provs[k].coarse_indices)
            if np.any(rows < 0):
                raise ValueError(f"level {k + 1} map does not cover the pooled cells of level {k}")
            self._restrict[k] = (rows, len(x))
            x = SparseGrid(x.spec, provs[k].coarse_indices, x.features[rows], check=False)
            up = voxel_unpool(x, provs[k])
            if not up.same_active(enc[k]):
                raise ValueError(f"unpooled level {k} does not match the encoder active set")
            lat = self.laterals[str(k)](enc[k])
            x = self.blocks[str(k)](up.with_features(up.features + lat.features))
            maps[k] = x
        self._provs = provs
        return {k: maps[k] for k in self.cfg.head_levels}

    def backward(self, d_maps: dict[int, np.ndarray]) -> list[np.ndarray | None]:
        L = self.cfg.stages
        d_enc: list[np.ndarray | None] = [None] * L
        d = None
        for k in range(self.lowest, L - 1):
            dk = d_maps.get(k)
            if d is not None:
                dk = d if dk is None else dk + d
            if dk is None:
                d = None
                continue
            dsum = self.blocks[str(k)].backward(dk)
            d_enc[k] = self.laterals[str(k)].backward(dsum)
            rows, n = self._restrict[k]
            d = np.zeros((n, dsum.shape[1]))
            np.add.at(d, rows, unpool_backward(self._provs[k], dsum))
        dk = d_maps.get(L - 1)
        if d is not None:
            dk = d if dk is None else dk + d
        if dk is not None:
            d_enc[L - 1] = self.top.backward(dk)
        return d_enc


class DPVCN(Module):
    """Encoder + FPN decoder; returns feature maps keyed by encoder level."""

    def __init__(self, in_channels: int, cfg: BackboneCfg, seed=0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(in_channels, cfg, seed=rng)
        self.decoder = FPNDecoder(cfg, seed=rng)
        self.cfg = cfg

    def forward(self, g: SparseGrid) -> dict[int, SparseGrid]:
        enc, provs = self.encoder(g)
        self._enc = enc
        return self.decoder(enc, provs)

    def backward(self, d_maps: dict[int, np.ndarray]) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(d_maps))


def encoder_forward(encoder: Encoder, g: SparseGrid):
    return encoder(g)


def fpn_decoder_forward(decoder: FPNDecoder, encoder_outputs, provenance):
    return decoder(encoder_outputs, provenance)


def dpvcn_forward(backbone: DPVCN, g: SparseGrid) -> dict[int, SparseGrid]:
    return backbone(g)
