from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass
class CameraFrame:
    """Pinhole camera with a world-to-camera pose and its observations.

    ``R`` and ``T`` map world points to camera space (x right, y down,
    z forward).  ``image`` is [3, H, W] and ``pseudo_depth`` [1, H, W], both
    optional for pure rendering.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int
    t: int = 0
    name: str = ""
    image: np.ndarray | None = field(default=None, repr=False)
    pseudo_depth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    def check_pose(self, tol: float = 1e-5) -> None:
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=tol):
            raise ValueError(f"camera {self.name or self.t}: rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValueError(f"camera {self.name or self.t}: rotation has det != +1")

    def resized(self, width: int, height: int) -> "CameraFrame":
        """Same pose with intrinsics rescaled to a new image size (no image data)."""
        sx, sy = width / self.width, height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
            image=None,
            pseudo_depth=None,
        )


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, T) for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear upwards in the image;
    with the y-down camera convention the default keeps world -y on top.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye
