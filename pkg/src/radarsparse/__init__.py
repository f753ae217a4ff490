"""Sparse radar BEV object detection in numpy: multigrid rendering, sparse and
kernel point convolutions, a dual-branch sparse backbone, detection heads and
metrics."""

from .boxes import OBB, rotated_iou
from .config import Config, ConfigError, desk_preset, load_config, paper_preset
from .detection import Detection, ap_at_distance, aoe, ase, decode_obb, encode_obb, evaluate, nms, toy_loss
from .grid import GridSpec, SparseGrid, max_pool2, voxel_pad, voxel_unpool
from .model import Detector, train_toy
from .points import PointCloud, RadarPoint, SceneSpec, load_points_csv, radius_neighbors, synth_scene

__version__ = "0.1.0"

__all__ = [
    "OBB", "Config", "ConfigError", "Detection", "Detector", "GridSpec", "PointCloud", "RadarPoint",
    "SceneSpec", "SparseGrid", "aoe", "ap_at_distance", "ase", "decode_obb", "desk_preset", "encode_obb",
    "evaluate", "load_config", "load_points_csv", "max_pool2", "nms", "paper_preset", "radius_neighbors",
    "rotated_iou", "synth_scene", "toy_loss", "train_toy", "voxel_pad", "voxel_unpool",
]
