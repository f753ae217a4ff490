"""Full detector (renderer -> backbone -> per-class heads) and toy training."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import OBB
from .config import Config
from .detection import Detection, DetectionHead, decode_grid, nms, toy_loss
from .grid import SparseGrid
from .backbone import DPVCN
from .nn import Module, sgd_step
from .points import CLASS_NAMES, PointCloud, SceneSpec, augment_rcs, synth_scene
from .render import Renderer


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


class Detector(Module):
    def __init__(self, cfg: Config):
        rng = np.random.default_rng(cfg.seed)
        r = cfg.render
        self.renderer = Renderer(r.mode, r.f_out, r.K, r.radius, r.sigma, r.use_coords, seed=rng)
        self.backbone = DPVCN(r.f_out, cfg.backbone, seed=rng)
        self.heads = {c: DetectionHead(cfg.backbone.decoder_channels, seed=rng) for c in CLASS_NAMES}
        self.cfg = cfg

    def forward(self, cloud: PointCloud) -> dict[str, SparseGrid]:
        """Raw 7-channel predictions per class, at that class's head level."""
        g = self.renderer(self.cfg.grid_spec(), cloud)
        self._input = g
        maps = self.backbone(g)
        return {c: self.heads[c](maps[self.cfg.head.classes[c].level]) for c in CLASS_NAMES}

    def backward(self, d_raw: dict[str, np.ndarray]) -> None:
        d_maps: dict[int, np.ndarray] = {}
        for c, d in d_raw.items():
            lvl = self.cfg.head.classes[c].level
            dm = self.heads[c].backward(d)
            d_maps[lvl] = d_maps[lvl] + dm if lvl in d_maps else dm
        d_in = self.backbone.backward(d_maps)
        if d_in is not None and len(self._input):
            self.renderer.backward(d_in)

    def loss(self, cloud: PointCloud, ground_truth: Sequence[tuple[str, OBB]]) -> tuple[float, dict]:
        """Forward + toy loss summed over classes; leaves d loss / d raw in the returned dict."""
        raw = self.forward(cloud)
        total, grads = 0.0, {}
        t = self.cfg.train
        for c, pred in raw.items():
            boxes = [b for cls, b in ground_truth if cls == c]
            val, g, _ = toy_loss(pred, boxes, t.reg_weight, t.max_distance)
            total += val
            grads[c] = g
        return total, grads

    def predict(self, cloud: PointCloud) -> list[Detection]:
        raw = self.forward(cloud)
        out = []
        for c in CLASS_NAMES:
            hc = self.cfg.head.classes[c]
            out.extend(nms(decode_grid(raw[c], c, hc.score_threshold), hc.nms_iou))
        return out


def build_model(cfg: Config) -> Detector:
    return Detector(cfg)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        for p in params:
            p.grad *= max_norm / total
    return total


def train_toy(model: Detector, scenes: Sequence[tuple[PointCloud, list]], epochs: int, lr: float,
              seed: int = 0, rcs_sigma: float = 0.0, clip_norm: float = 0.0) -> TrainResult:
    """Plain SGD, one scene per step, scenes visited in a seeded order each epoch.

    The recorded loss of a step is the loss before that step's update.
    ``clip_norm > 0`` caps the global gradient norm of each step.
    """
    if not scenes:
        raise ValueError("train_toy needs at least one scene")
    rng = np.random.default_rng(seed)
    model.train()
    params = model.parameters()
    result = TrainResult()
    step = 0
    for _ in range(epochs):
        for k in rng.permutation(len(scenes)):
            cloud, gt = scenes[k]
            if rcs_sigma > 0:
                cloud = augment_rcs(cloud, rcs_sigma, rng)
            model.zero_grad()
            # overflow shows up as a non-finite loss or gradient norm below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = model.loss(cloud, gt)
                if not np.isfinite(loss):
                    raise TrainingError(step, loss)
                model.backward(grads)
                gnorm = clip_grad_norm(params, clip_norm)
            if not math.isfinite(gnorm):
                raise TrainingError(step, loss)
            sgd_step(params, lr)
            result.losses.append(float(loss))
            step += 1
    model.eval()
    return result


# --------------------------------------------------------------------------
# scene files


def toy_scene_spec(extent=(-16.0, 16.0, -16.0, 16.0), seed: int = 7) -> SceneSpec:
    """The fixed two-car, one-VRU training scene."""
    return SceneSpec.from_dict({
        "objects": [
            {"box": [-7.0, 4.0, 1.8, 4.5, 0.3], "velocity": [5.0, 0.0], "class": "car"},
            {"box": [6.0, -5.0, 1.9, 4.6, -1.2], "velocity": [0.0, -8.0], "class": "car"},
            {"box": [3.0, 8.0, 0.8, 0.8, 0.0], "velocity": [1.0, 0.5], "class": "vru"},
        ],
        "clutter_count": 15,
        "points_per_object": 20,
        "seed": seed,
        "extent": list(extent),
    })


def load_scenes(path: str | Path) -> list[SceneSpec]:
    """JSON: one scene object or a list of them (see ``SceneSpec.from_dict``)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [SceneSpec.from_dict(d) for d in data]


def save_scenes(specs: Sequence[SceneSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2) + "\n", encoding="utf-8")


def materialize(specs: Sequence[SceneSpec]):
    return [synth_scene(s) for s in specs]
