from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..numerics import Tensor, sqrt, tsum

PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1 - p))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1)


@dataclass
class SceneBounds:
    center: np.ndarray
    extent: float

    @classmethod
    def from_points(cls, points) -> "SceneBounds":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        center = pts.mean(axis=0)
        extent = float(np.linalg.norm(pts - center, axis=1).max()) if len(pts) else 0.0
        return cls(center, max(extent, 1e-6))

    def normalize(self, xyz: np.ndarray) -> np.ndarray:
        """Map positions into the unit cube covering the bounding sphere, clamped."""
        lo = self.center - self.extent
        return np.clip((np.asarray(xyz) - lo) / (2 * self.extent), 0.0, 1.0)


class GaussianPairs:
    """Intrinsic/Degraded Gaussian pairs stored as parameter tensors.

    Both members of a pair share position, scale, rotation and opacity; only
    the intrinsic color is stored.  The degraded color is computed per frame.
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits, color_logits, dtype=np.float32):
        for name, value in zip(PARAM_NAMES, (positions, log_scales, rotations, opacity_logits, color_logits)):
            setattr(self, name, Tensor(value, requires_grad=True, name=name, dtype=dtype))
        n = self.positions.shape[0]
        expected = {"positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
                    "opacity_logits": (n,), "color_logits": (n, 3)}
        for key, shape in expected.items():
            if getattr(self, key).shape != shape:
                raise ValueError(f"{key} has shape {getattr(self, key).shape}, expected {shape}")

    @classmethod
    def empty(cls) -> "GaussianPairs":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_values(cls, positions, scales, rotations, opacities, colors, dtype=np.float32) -> "GaussianPairs":
        """Build from decoded values (axis scales, opacities and colors in (0, 1))."""
        return cls(
            positions,
            np.log(np.asarray(scales, dtype=np.float64)),
            rotations,
            logit(np.clip(opacities, 1e-6, 1 - 1e-6)),
            logit(np.clip(colors, 1e-6, 1 - 1e-6)),
            dtype=dtype,
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianPairs":
        return GaussianPairs(*(getattr(self, k).data.copy() for k in PARAM_NAMES), dtype=self.positions.dtype)

    def colors(self) -> np.ndarray:
        return _sigmoid(self.color_logits.data)

    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits.data)

    def normalize_rotations(self) -> None:
        q = self.rotations.data
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        self.rotations.data = (q / np.where(norm > 0, norm, 1)).astype(q.dtype)


def init_from_points(points, colors, count_limit: int, seed: int = 0) -> GaussianPairs:
    """One Gaussian per point, randomly subsampled down to ``count_limit``.

    Scales are isotropic: the mean distance to the 3 nearest neighbours.
    When fewer than 3 neighbours exist the list is padded by repeating the
    nearest one; a lone point gets scale 0.01.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot initialize Gaussians from an empty point list")
    if count_limit < 1:
        raise ValueError("count_limit must be >= 1")
    if len(points) > count_limit:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(points), size=count_limit, replace=False))
        points, colors = points[keep], colors[keep]

    n = len(points)
    if n == 1:
        mean_dist = np.array([0.01])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        dist = dist[:, 1:]
        if k < 3:
            dist = np.concatenate([dist, np.repeat(dist[:, :1], 3 - k, axis=1)], axis=1)
        mean_dist = dist.mean(axis=1)
    log_scale = np.log(np.maximum(mean_dist, 1e-7))

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianPairs(
        points,
        np.repeat(log_scale[:, None], 3, axis=1),
        rotations,
        np.full(n, logit(0.1)),
        logit(np.clip(colors, 0.001, 0.999)),
    )


def viewpoint_distance(positions, cam) -> Tensor:
    """Distance from each Gaussian center [N, 3] to the camera center, [N]."""
    diff = positions - cam.center
    return sqrt(tsum(diff * diff, axis=-1))
