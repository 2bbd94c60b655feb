"""Underwater color degradation and procedural caustics.

Spatial degradation follows the attenuation/backscatter form
``c * exp(-beta r) + A (1 - exp(-gamma r))``.  Temporal degradation in the
model is an additive per-Gaussian offset; for dataset synthesis it is a
world-anchored multiplicative caustic field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import Tensor, as_tensor, exp, reshape
from .scene import CameraFrame


@dataclass
class WaterParams:
    """Per-frame water: ambient light ``A``, attenuation ``beta``, backscatter ``gamma``.

    Fields may be numpy arrays or tensors of shape [3].
    """

    A: object
    beta: object
    gamma: object

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(_data(v), dtype=np.float64).reshape(3) for v in (self.A, self.beta, self.gamma)])

    @classmethod
    def from_vector(cls, v) -> "WaterParams":
        v = np.asarray(v, dtype=np.float64).reshape(9)
        return cls(v[0:3].copy(), v[3:6].copy(), v[6:9].copy())

    def validate(self) -> None:
        v = self.vector()
        if not np.all(np.isfinite(v)):
            raise ValueError("water parameters must be finite")
        if np.any(v[0:3] <= 0) or np.any(v[0:3] >= 1):
            raise ValueError(f"ambient light must lie in (0, 1), got {v[0:3]}")
        if np.any(v[3:] <= 0):
            raise ValueError(f"attenuation and backscatter must be positive, got {v[3:]}")

    def detach(self) -> "WaterParams":
        return WaterParams.from_vector(self.vector())


def _data(v):
    return v.data if isinstance(v, Tensor) else v


# (A, beta, gamma) per simulated scene; identical across caustic patterns.
WATER_TABLE: dict[str, tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]] = {
    "S1-A-Low": ((0.10, 0.55, 0.78), (1.65, 1.45, 1.25), (1.33, 1.25, 1.20)),
    "S1-A-Med": ((0.10, 0.55, 0.78), (3.30, 2.90, 2.50), (2.00, 1.88, 1.80)),
    "S1-A-High": ((0.10, 0.55, 0.78), (4.71, 4.14, 3.57), (4.00, 3.75, 3.60)),
    "S2-A-Low": ((0.23, 0.38, 0.49), (1.03, 0.91, 0.78), (3.20, 3.00, 2.88)),
    "S2-A-Med": ((0.23, 0.38, 0.49), (2.75, 2.42, 2.08), (5.00, 4.69, 4.50)),
    "S2-A-High": ((0.23, 0.38, 0.49), (8.25, 7.25, 6.25), (8.89, 8.33, 8.00)),
    "S3-A-Low": ((0.10, 0.65, 0.41), (2.12, 1.16, 1.92), (2.00, 1.88, 1.80)),
    "S3-A-Med": ((0.10, 0.65, 0.41), (3.79, 2.07, 3.43), (3.20, 3.00, 2.88)),
    "S3-A-High": ((0.10, 0.65, 0.41), (4.44, 3.22, 4.44), (4.00, 3.75, 3.60)),
}
for _scene in ("S1", "S2", "S3"):
    for _pattern in ("B", "C"):
        WATER_TABLE[f"{_scene}-{_pattern}-Med"] = WATER_TABLE[f"{_scene}-A-Med"]


def water_preset(name: str) -> WaterParams:
    try:
        A, beta, gamma = WATER_TABLE[name]
    except KeyError:
        raise KeyError(f"unknown water preset {name!r}; known: {sorted(WATER_TABLE)}") from None
    return WaterParams(np.array(A), np.array(beta), np.array(gamma))


def degrade_color(color, water: WaterParams, r, eps=None) -> Tensor:
    """Degraded color of each Gaussian at distance ``r``.

    ``color`` is [N, 3] (or [3]), ``r`` is [N] (or scalar), ``eps`` matches
    ``color`` or is None.  The result is not clamped.
    """
    color = as_tensor(color)
    r = as_tensor(r, like=color)
    if color.ndim == 2:
        r = reshape(r, (-1, 1))
    A = as_tensor(water.A, like=color)
    beta = as_tensor(water.beta, like=color)
    gamma = as_tensor(water.gamma, like=color)
    out = color * exp(-beta * r) + A * (1.0 - exp(-gamma * r))
    if eps is not None:
        out = out + eps
    return out


def apply_water_image(clean, depth, water: WaterParams) -> Tensor:
    """Pixel-wise spatial degradation of a [3, H, W] image with depth [1, H, W]."""
    clean = as_tensor(clean)
    depth = as_tensor(depth, like=clean)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {clean.shape}")
    if depth.shape != (1,) + clean.shape[1:]:
        raise ValueError(f"depth shape {depth.shape} does not match image {clean.shape}")
    col = lambda v: reshape(as_tensor(v, like=clean), (3, 1, 1))  # noqa: E731
    return clean * exp(-col(water.beta) * depth) + col(water.A) * (1.0 - exp(-col(water.gamma) * depth))


# ---------------------------------------------------------------------------
# caustics
# ---------------------------------------------------------------------------


@dataclass
class CausticConfig:
    pattern_id: str = "A"
    base_frequency: float = 4.0
    velocity: tuple[float, float] = (0.02, 0.01)
    octaves: int = 3
    amplitude: float = 0.4
    seed: int = 1

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.amplitude < 0:
            raise ValueError("caustic amplitude must be >= 0")
        if self.octaves < 1:
            raise ValueError("caustic octaves must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CausticConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "CausticConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


CAUSTIC_PRESETS = {
    "A": CausticConfig("A", base_frequency=4.0, velocity=(0.020, 0.010), octaves=3, amplitude=0.4, seed=11),
    "B": CausticConfig("B", base_frequency=6.0, velocity=(-0.015, 0.025), octaves=2, amplitude=0.4, seed=23),
    "C": CausticConfig("C", base_frequency=3.0, velocity=(0.030, -0.012), octaves=4, amplitude=0.4, seed=37),
}

# Output contrast: the averaged ridge field is raised to this power so that
# filaments stay bright and thin and the field mean sits near 0.5.
RIDGE_POWER = 1.6
_SMOOTHSTEP_SLOPE = 1.5


def _hash_unit(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice values in [0, 1) from integer coordinates."""
    # wraparound is the point of the mixing constants
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
        h ^= np.uint64((seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xC4CEB9FE1A85EC53)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    v00 = _hash_unit(ix, iy, seed)
    v10 = _hash_unit(ix + 1, iy, seed)
    v01 = _hash_unit(ix, iy + 1, seed)
    v11 = _hash_unit(ix + 1, iy + 1, seed)
    top = v00 + (v10 - v00) * sx
    bottom = v01 + (v11 - v01) * sx
    return top + (bottom - top) * sy


def caustic_value(cfg: CausticConfig, world_xy, t) -> np.ndarray:
    """Caustic intensity in [0, 1] at world positions ``world_xy`` [..., 2] and frame ``t``."""
    xy = np.asarray(world_xy, dtype=np.float64)
    vx, vy = cfg.velocity
    total = np.zeros(xy.shape[:-1])
    norm = 0.0
    for k in range(cfg.octaves):
        freq = cfg.base_frequency * 2.0**k
        weight = 0.5**k
        ox, oy = _hash_unit(np.array([k]), np.array([7]), cfg.seed)[0] * 97.0, _hash_unit(np.array([k]), np.array([13]), cfg.seed)[0] * 89.0
        x = freq * (xy[..., 0] - vx * t) + ox
        y = freq * (xy[..., 1] - vy * t) + oy
        v = _value_noise(x, y, cfg.seed + 7919 * k)
        total += weight * (1.0 - np.abs(2.0 * v - 1.0))
        norm += weight
    return np.clip(total / norm, 0.0, 1.0) ** RIDGE_POWER


def caustic_temporal_bound(cfg: CausticConfig) -> float:
    """Upper bound on |C(x, t+1) - C(x, t)| implied by velocity and frequency."""
    speed = float(np.hypot(*cfg.velocity))
    num = sum(0.5**k * 2.0 * _SMOOTHSTEP_SLOPE * np.sqrt(2.0) * cfg.base_frequency * 2.0**k for k in range(cfg.octaves))
    den = sum(0.5**k for k in range(cfg.octaves))
    return RIDGE_POWER * speed * num / den


def backproject(depth: np.ndarray, cam: CameraFrame) -> np.ndarray:
    """World points [H, W, 3] for every pixel centre at camera-space depth ``depth`` [1, H, W]."""
    z = np.asarray(depth, dtype=np.float64).reshape(cam.height, cam.width)
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    pc = np.stack([(uu - cam.cx) / cam.fx * z, (vv - cam.cy) / cam.fy * z, z], axis=-1)
    return (pc - cam.T) @ cam.R


def modulate_caustics(clean, depth, cam: CameraFrame, cfg: CausticConfig, t) -> np.ndarray:
    """Scale each pixel by ``1 + amplitude * (2C - 1)`` with C anchored to world xy."""
    clean = np.asarray(clean)
    if cfg.amplitude == 0:
        return clean.copy()
    world = backproject(depth, cam)
    c = caustic_value(cfg, world[..., :2], t)
    factor = 1.0 + cfg.amplitude * (2.0 * c - 1.0)
    return (clean * factor[None]).astype(clean.dtype)
