"""Dual-Gaussian scene representation, cameras and persistence."""

from .camera import CameraFrame, look_at, quat_to_rotmat, rotmat_to_quat
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .colmap import ColmapParseError, load_colmap, write_colmap
from .gaussians import GaussianPairs, SceneBounds, init_from_points, logit, viewpoint_distance

__all__ = [
    "CameraFrame",
    "Checkpoint",
    "CheckpointError",
    "ColmapParseError",
    "GaussianPairs",
    "SceneBounds",
    "init_from_points",
    "load_checkpoint",
    "load_colmap",
    "logit",
    "look_at",
    "quat_to_rotmat",
    "rotmat_to_quat",
    "save_checkpoint",
    "viewpoint_distance",
    "write_colmap",
]
