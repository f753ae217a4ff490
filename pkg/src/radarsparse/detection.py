"""Detection heads, box coding, rotated NMS, toy loss and BEV detection metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import OBB, rotated_iou, wrap_angle
from .grid import GridSpec, SparseGrid
from .nn import Linear, Module, ReLU
from .points import CLASS_NAMES, ParseError
from .sparse_conv import SparseConv

RAW_FIELDS = ("objectness", "dx", "dy", "log_w", "log_l", "sin_yaw", "cos_yaw")


@dataclass(frozen=True)
class Detection:
    box: OBB
    score: float
    class_id: str = "car"
    # canonical cell key of the predicting cell; breaks score ties in NMS
    cell: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id not in CLASS_NAMES:
            raise ValueError(f"unknown class '{self.class_id}'")


@dataclass(frozen=True)
class ClassHeadCfg:
    level: int
    score_threshold: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self):
        for name in ("score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class HeadCfg:
    classes: dict[str, ClassHeadCfg] = field(default_factory=lambda: {
        "car": ClassHeadCfg(level=2), "vru": ClassHeadCfg(level=1)})


class DetectionHead(Module):
    """SSC(C, C, 3) -> ReLU -> per-cell linear to the 7 raw outputs.

    The objectness bias starts at the logit of ``prior`` so that the many
    empty cells do not swamp the first updates.
    """

    def __init__(self, channels: int, seed=0, prior: float = 0.01):
        rng = np.random.default_rng(seed)
        self.conv = SparseConv(channels, channels, 3, seed=rng)
        self.relu = ReLU()
        self.out = Linear(channels, len(RAW_FIELDS), seed=rng)
        self.out.weight.value *= 0.1
        self.out.bias.value[0] = math.log(prior / (1.0 - prior))
        self.channels = channels

    def forward(self, g: SparseGrid) -> SparseGrid:
        if g.channels != self.channels:
            raise ValueError(f"head expects {self.channels} channels, got {g.channels}")
        return self.out(self.relu(self.conv(g)))

    def backward(self, d: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.relu.backward(self.out.backward(d)))


def head_forward(head: DetectionHead, feature_map: SparseGrid) -> SparseGrid:
    return head(feature_map)


# --------------------------------------------------------------------------
# box coding


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def encode_obb(spec: GridSpec, cell, box: OBB) -> np.ndarray:
    """Regression targets (dx, dy, log w, log l, sin yaw, cos yaw) of a box seen from a cell."""
    cx, cy = spec.cell_centers(np.asarray(cell))[0]
    return np.array([(box.cx - cx) / spec.cell_size, (box.cy - cy) / spec.cell_size,
                     math.log(box.w), math.log(box.l), math.sin(box.yaw), math.cos(box.yaw)])


def decode_obb(spec: GridSpec, cell, raw, class_id: str = "car") -> Detection:
    raw = np.asarray(raw, dtype=np.float64)
    cx, cy = spec.cell_centers(np.asarray(cell))[0]
    box = OBB(cx + raw[1] * spec.cell_size, cy + raw[2] * spec.cell_size,
              math.exp(raw[3]), math.exp(raw[4]), wrap_angle(math.atan2(raw[5], raw[6])))
    key = int(spec.keys(np.asarray(cell))[0])
    return Detection(box, float(_sigmoid(raw[0])), class_id, key)


def decode_grid(pred: SparseGrid, class_id: str, score_threshold: float = 0.0) -> list[Detection]:
    scores = _sigmoid(pred.features[:, 0]) if len(pred) else np.zeros(0)
    keep = np.flatnonzero(scores >= score_threshold)
    return [decode_obb(pred.spec, pred.indices[r], pred.features[r], class_id) for r in keep]


# --------------------------------------------------------------------------
# NMS


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy rotated NMS: highest score first (ties: lower cell key), keep a box
    iff its IoU with every kept box is below the threshold."""
    order = sorted(detections, key=lambda d: (-d.score, d.cell))
    kept: list[Detection] = []
    for det in order:
        if all(rotated_iou(det.box, k.box) < iou_threshold for k in kept):
            kept.append(det)
    return kept


# --------------------------------------------------------------------------
# metrics


def match_by_distance(predictions: Sequence[Detection], ground_truth: Sequence[OBB], d: float):
    """Greedy score-ordered one-to-one matching by centre distance <= d.

    Returns the sorted predictions and, per prediction, the matched gt index or -1.
    """
    preds = sorted(predictions, key=lambda p: (-p.score, p.cell))
    taken = np.zeros(len(ground_truth), dtype=bool)
    gxy = np.array([[g.cx, g.cy] for g in ground_truth]).reshape(-1, 2)
    match = []
    for p in preds:
        if len(gxy) == 0:
            match.append(-1)
            continue
        dist = np.hypot(gxy[:, 0] - p.box.cx, gxy[:, 1] - p.box.cy)
        dist[taken] = np.inf
        k = int(np.argmin(dist))
        if dist[k] <= d:
            taken[k] = True
            match.append(k)
        else:
            match.append(-1)
    return preds, match


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def ap_at_distance(predictions: Sequence[Detection], ground_truth: Sequence[OBB], d: float) -> float:
    if not d > 0:
        raise ValueError("matching distance must be positive")
    _, match = match_by_distance(predictions, ground_truth, d)
    return average_precision(np.array([m >= 0 for m in match], dtype=float), len(ground_truth))


def ase(pred: OBB, gt: OBB) -> float:
    """1 - IoU of the two extents once centres and yaw are aligned."""
    pw, pl = sorted((pred.w, pred.l))
    gw, gl = sorted((gt.w, gt.l))
    inter = min(pw, gw) * min(pl, gl)
    return 1.0 - inter / (pw * pl + gw * gl - inter)


def aoe(pred_yaw: float, gt_yaw: float) -> float:
    """Smallest absolute yaw difference on the circle, in [0, pi]."""
    return abs(wrap_angle(pred_yaw - gt_yaw))


@dataclass
class ClassMetrics:
    ap: dict[float, float]
    ase: float
    aoe: float
    tp_count: int

    @property
    def mean_ap(self) -> float:
        return float(np.mean(list(self.ap.values())))


def evaluate_scenes(scenes: Sequence[tuple[Sequence[Detection], Sequence[tuple[str, OBB]]]],
                    thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0), tp_threshold: float = 2.0,
                    classes: Sequence[str] | None = None) -> dict[str, ClassMetrics]:
    """Per-class AP at each centre-distance threshold plus ASE/AOE over the
    true positives matched at ``tp_threshold``.

    Matching happens within each scene; the precision/recall curve pools
    all scenes ranked by score.
    """
    if classes is None:
        classes = sorted({c for _, gt in scenes for c, _ in gt} | {d.class_id for dets, _ in scenes for d in dets})
    out = {}
    for cls in classes:
        per_scene = [([d for d in dets if d.class_id == cls], [b for c, b in gt if c == cls]) for dets, gt in scenes]
        num_gt = sum(len(g) for _, g in per_scene)
        aps = {}
        for t in thresholds:
            if not t > 0:
                raise ValueError("matching distance must be positive")
            ranked = []
            for preds, gts in per_scene:
                sp, match = match_by_distance(preds, gts, t)
                ranked += [(-p.score, p.cell, m >= 0) for p, m in zip(sp, match)]
            ranked.sort(key=lambda r: (r[0], r[1]))
            aps[float(t)] = average_precision(np.array([r[2] for r in ranked], dtype=float), num_gt)
        pairs = []
        for preds, gts in per_scene:
            sp, match = match_by_distance(preds, gts, tp_threshold)
            pairs += [(p.box, gts[m]) for p, m in zip(sp, match) if m >= 0]
        a_se = float(np.mean([ase(p, g) for p, g in pairs])) if pairs else float("nan")
        a_oe = float(np.mean([aoe(p.yaw, g.yaw) for p, g in pairs])) if pairs else float("nan")
        out[cls] = ClassMetrics(aps, a_se, a_oe, len(pairs))
    return out


def evaluate(detections: Sequence[Detection], ground_truth: Sequence[tuple[str, OBB]],
             thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0), tp_threshold: float = 2.0,
             classes: Sequence[str] | None = None) -> dict[str, ClassMetrics]:
    """Single-scene :func:`evaluate_scenes`."""
    return evaluate_scenes([(detections, ground_truth)], thresholds, tp_threshold, classes)


# --------------------------------------------------------------------------
# toy training loss


@dataclass
class LossInfo:
    cls: float
    reg: float
    positives: np.ndarray  # active rows assigned a ground-truth box


def assign_targets(pred: SparseGrid, boxes: Sequence[OBB], max_distance: float = 2.0):
    """The active cell nearest each box centre (within ``max_distance``) is positive.

    Returns (rows, box index per row); a cell claimed twice keeps the closer box.
    """
    if len(pred) == 0 or not boxes:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    centers = pred.spec.cell_centers(pred.indices)
    best: dict[int, tuple[float, int]] = {}
    for k, b in enumerate(boxes):
        dist = np.hypot(centers[:, 0] - b.cx, centers[:, 1] - b.cy)
        r = int(np.argmin(dist))
        if dist[r] <= max_distance and (r not in best or dist[r] < best[r][0]):
            best[r] = (float(dist[r]), k)
    rows = np.array(sorted(best), dtype=np.int64)
    return rows, np.array([best[r][1] for r in rows], dtype=np.int64)


def toy_loss(pred: SparseGrid, boxes: Sequence[OBB], reg_weight: float = 1.0,
             max_distance: float = 2.0) -> tuple[float, np.ndarray, LossInfo]:
    """Objectness BCE summed over all active cells plus reg_weight * smooth-L1
    box loss summed over positive cells, both divided by max(1, #positives).

    Returns (loss, d loss / d raw, info).
    """
    raw = pred.features
    grad = np.zeros_like(raw)
    if len(raw) == 0:
        return 0.0, grad, LossInfo(0.0, 0.0, np.zeros(0, dtype=np.int64))
    rows, which = assign_targets(pred, boxes, max_distance)
    target = np.zeros(len(raw))
    target[rows] = 1.0
    z = raw[:, 0]
    bce = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    norm = max(1, len(rows))
    cls = float(bce.sum() / norm)
    grad[:, 0] = (_sigmoid(z) - target) / norm
    reg = 0.0
    if len(rows):
        tgt = np.stack([encode_obb(pred.spec, pred.indices[r], boxes[k]) for r, k in zip(rows, which)])
        diff = raw[rows, 1:] - tgt
        ad = np.abs(diff)
        sl1 = np.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5)
        reg = float(sl1.sum() / norm)
        grad[rows, 1:] = reg_weight * np.where(ad < 1.0, diff, np.sign(diff)) / norm
    return cls + reg_weight * reg, grad, LossInfo(cls, reg, rows)


# --------------------------------------------------------------------------
# files


def format_detection(d: Detection) -> str:
    b = d.box
    return f"{d.class_id} {d.score:.9g} {b.cx:.9g} {b.cy:.9g} {b.w:.9g} {b.l:.9g} {b.yaw:.9g}"


def write_detections(path: str | Path, detections: Sequence[Detection]) -> None:
    """One detection per line: ``class score cx cy w l yaw`` (space separated)."""
    text = "".join(format_detection(d) + "\n" for d in detections)
    Path(path).write_text(text, encoding="utf-8")


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields 'class score cx cy w l yaw', got {len(parts)}", row=lineno)
        try:
            vals = [float(v) for v in parts[1:]]
            out.append(Detection(OBB(*vals[1:]), vals[0], parts[0], lineno))
        except ValueError as exc:
            raise ParseError(str(exc), row=lineno) from None
    return out


def read_ground_truth(path: str | Path) -> list[tuple[str, OBB]]:
    return [(d.class_id, d.box) for d in read_detections(path)]


def write_ground_truth(path: str | Path, gt: Sequence[tuple[str, OBB]]) -> None:
    write_detections(path, [Detection(b, 1.0, c) for c, b in gt])
