"""Image-quality metrics and test-view evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degradation import WaterParams, degrade_color
from .losses import ssim as _ssim
from .renderer import render_gaussians
from .scene import CameraFrame, GaussianPairs, viewpoint_distance

PSNR_CAP = 99.0
MODES = ("intrinsic", "degraded_with_water")


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def ssim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(_ssim(a, b).data)


# sRGB (D65) -> XYZ
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(rgb) -> np.ndarray:
    """sRGB values in [0, 1] with channels on the last axis to CIE L*a*b* (D65)."""
    c = np.clip(np.asarray(rgb, dtype=np.float64), 0, 1)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T / _WHITE_D65
    d = 6 / 29
    f = np.where(xyz > d**3, np.cbrt(xyz), xyz / (3 * d * d) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def ciede2000(lab1, lab2) -> np.ndarray:
    """CIEDE2000 colour difference (kL = kC = kH = 1); Lab on the last axis."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    g = 0.5 * (1 - np.sqrt(c_bar**7 / (c_bar**7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dL = L2 - L1
    dC = c2p - c1p
    prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, dh)
    dh = np.where(dh < -180, dh + 360, dh)
    dh = np.where(prod == 0, 0.0, dh)
    dH = 2 * np.sqrt(prod) * np.sin(np.radians(dh) / 2)

    L_bar = (L1 + L2) / 2
    cp_bar = (c1p + c2p) / 2
    hsum = h1p + h2p
    h_bar = np.where(np.abs(h1p - h2p) <= 180, hsum / 2, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2))
    h_bar = np.where(prod == 0, hsum, h_bar)

    t = (
        1
        - 0.17 * np.cos(np.radians(h_bar - 30))
        + 0.24 * np.cos(np.radians(2 * h_bar))
        + 0.32 * np.cos(np.radians(3 * h_bar + 6))
        - 0.20 * np.cos(np.radians(4 * h_bar - 63))
    )
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    r_c = 2 * np.sqrt(cp_bar**7 / (cp_bar**7 + 25.0**7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * cp_bar
    s_h = 1 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c
    tl, tc, th = dL / s_l, dC / s_c, dH / s_h
    return np.sqrt(tl**2 + tc**2 + th**2 + r_t * tc * th)


def delta_e00_image(a, b) -> float:
    """Mean CIEDE2000 between two [3, H, W] sRGB images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    la = srgb_to_lab(np.moveaxis(a, 0, -1))
    lb = srgb_to_lab(np.moveaxis(b, 0, -1))
    return float(np.mean(ciede2000(la, lb)))


def angular_error(a, b) -> float:
    """Mean per-pixel angle (degrees) between RGB vectors of two [3, H, W] images.

    Pixels black in both images contribute 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    dot = np.sum(a * b, axis=0)
    cos = dot / ((na + 1e-8) * (nb + 1e-8))
    guarded = np.degrees(np.arccos(np.clip(cos, -1, 1)))
    # arccos loses half the digits near 0 degrees; atan2 of the cross and dot
    # products is exact there and equal elsewhere
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    ang = np.where((na < 1e-6) | (nb < 1e-6), guarded, np.degrees(np.arctan2(cross, dot)))
    ang = np.where((na < 1e-6) & (nb < 1e-6), 0.0, ang)
    return float(np.mean(ang))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ac, bc = a - a.mean(), b - b.mean()
    return float(np.sum(ac * bc) / (np.sqrt(np.sum(ac * ac) * np.sum(bc * bc)) + 1e-300))


def frame_metrics(rendered, reference) -> dict[str, float]:
    return {
        "psnr": psnr(rendered, reference),
        "ssim": ssim(rendered, reference),
        "delta_e00": delta_e00_image(rendered, reference),
        "angular_error_deg": angular_error(rendered, reference),
    }


# ---------------------------------------------------------------------------
# rendering modes and reports
# ---------------------------------------------------------------------------


def render_view(pairs: GaussianPairs, cam: CameraFrame, mode: str = "intrinsic", water: WaterParams | None = None, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """[3, H, W] render clipped to [0, 1]; underwater modes apply ``water`` with a zero offset."""
    intrinsic = pairs.colors()
    if mode == "intrinsic":
        colors = intrinsic
    elif mode in ("degraded_with_water", "underwater"):
        if water is None:
            raise ValueError(f"mode {mode!r} needs water parameters")
        r = viewpoint_distance(pairs.positions.data, cam)
        colors = degrade_color(intrinsic, water, r).data
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    return np.clip(np.asarray(render_gaussians(pairs, colors, cam, background).image.data, dtype=np.float64), 0, 1)


@dataclass
class EvalReport:
    frames: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict[str, float]:
        keys = ("psnr", "ssim", "delta_e00", "angular_error_deg")
        return {k: float(np.mean([f[k] for f in self.frames])) for k in keys} if self.frames else {}

    def to_dict(self) -> dict:
        return {"meta": self.meta, "mean": self.mean, "frames": self.frames}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _panel(path: Path, rendered: np.ndarray, reference: np.ndarray) -> None:
    from .datasets import write_png_rgb

    diff = np.clip(np.abs(rendered - reference) * 4, 0, 1)
    write_png_rgb(path, np.concatenate([rendered, reference, diff], axis=2))


def evaluate(
    pairs: GaussianPairs,
    dataset,
    mode: str = "intrinsic",
    water: WaterParams | None = None,
    reference: str | None = None,
    panel_dir=None,
    meta: dict | None = None,
) -> EvalReport:
    """Render every test view and score it.

    ``reference`` is ``"clean"`` (ground truth, the default for intrinsic
    mode) or ``"degraded"`` (the observed frames, the default otherwise).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    reference = reference or ("clean" if mode == "intrinsic" else "degraded")
    test = dataset.test
    if not test:
        raise ValueError("dataset has no test frames")
    if mode == "degraded_with_water" and water is None:
        water = dataset.water()
    report = EvalReport(meta={"mode": mode, "reference": reference, "split": "test", **(meta or {})})
    if panel_dir is not None:
        Path(panel_dir).mkdir(parents=True, exist_ok=True)
    for cam in test:
        # score what would be saved: renders are quantized to 8 bits like the references
        img = np.round(render_view(pairs, cam, mode, water) * 255) / 255
        ref = dataset.clean_image(cam) if reference == "clean" else np.asarray(cam.image, dtype=np.float64)
        rec = {"name": cam.name, "t": int(cam.t), **frame_metrics(img, np.asarray(ref, dtype=np.float64))}
        if not all(np.isfinite(v) for k, v in rec.items() if k not in ("name", "t")):
            raise FloatingPointError(f"non-finite metric on {cam.name}: {rec}")
        report.frames.append(rec)
        if panel_dir is not None:
            _panel(Path(panel_dir) / f"{Path(cam.name).stem}_panel.png", img, np.asarray(ref, dtype=np.float64))
    return report
