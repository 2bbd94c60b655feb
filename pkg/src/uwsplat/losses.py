"""Training objectives and the shared SSIM implementation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .numerics import Tensor, absolute, as_tensor, exp, matmul, mean, reshape, sqrt, tsum

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    l1: float = 0.8
    dssim: float = 0.2
    cds: float = 0.1
    ads: float = 0.01
    eps: float = 100.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@lru_cache(maxsize=32)
def _blur_matrix(n: int, dtype_str: str) -> np.ndarray:
    """Banded [n, n] matrix applying the 1-D Gaussian window with zero padding."""
    half = SSIM_WINDOW // 2
    k = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2 * SSIM_SIGMA**2))
    k /= k.sum()
    m = np.zeros((n, n))
    for off in range(-half, half + 1):
        m += np.eye(n, k=off) * k[off + half]
    return m.astype(dtype_str)


def _blur(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    gh = _blur_matrix(h, x.dtype.str)
    gw = _blur_matrix(w, x.dtype.str)
    return matmul(matmul(gh, x), gw)  # gw is symmetric


def ssim_map(a, b) -> Tensor:
    """Per-pixel SSIM of two [C, H, W] images (11x11 Gaussian window, sigma 1.5)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> Tensor:
    """Mean SSIM over channels and pixels; used by both the loss and the metrics."""
    return mean(ssim_map(a, b))


def photometric_loss(rendered, observed, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    rendered = as_tensor(rendered)
    observed = as_tensor(observed, like=rendered)
    if rendered.shape != observed.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {observed.shape}")
    l1 = mean(absolute(rendered - observed))
    return w.l1 * l1 + w.dssim * (1.0 - ssim(rendered, observed)) * 0.5


def pearson_depth_loss(pseudo, rendered_depth) -> Tensor:
    """One minus the Pearson correlation of two depth maps."""
    d = as_tensor(rendered_depth)
    p = as_tensor(pseudo, like=d)
    if d.size < 2:
        raise ValueError("need at least two pixels")
    d = reshape(d, (-1,))
    p = reshape(p, (-1,))
    dc = d - mean(d)
    pc = p - mean(p)
    cov = mean(dc * pc)
    # the floor is added in quadrature: exact affine invariance at any scale,
    # and a constant map gives loss 1 with a finite gradient
    sd = sqrt(mean(dc * dc) + 1e-16)
    sp = sqrt(mean(pc * pc) + 1e-16)
    return 1.0 - cov / (sd * sp)


def _edge_weights(pseudo: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pseudo, dtype=np.float64)[0]
    img = np.asarray(observed, dtype=np.float64)
    gpx = np.abs(np.diff(p, axis=1))
    gpy = np.abs(np.diff(p, axis=0))
    gix = np.abs(np.diff(img, axis=2)).mean(axis=0)
    giy = np.abs(np.diff(img, axis=1)).mean(axis=0)
    px, py = p[:, :-1], p[:-1, :]
    wx = (1 - px) * np.exp(-gpx) + px * np.exp(-gix)
    wy = (1 - py) * np.exp(-gpy) + py * np.exp(-giy)
    return wx, wy


def edge_aware_smoothness(rendered_depth, pseudo, observed) -> Tensor:
    """Weighted L1 of the rendered depth's forward differences.

    The weights come from the pseudo-depth and the observed image only and
    carry no gradient.  Near regions follow pseudo-depth edges, far regions
    follow image edges.
    """
    d = as_tensor(rendered_depth)
    if d.ndim != 3 or d.shape[1] < 2 or d.shape[2] < 2:
        raise ValueError(f"expected a [1, H, W] depth with H, W >= 2, got {d.shape}")
    wx, wy = _edge_weights(pseudo, observed)
    dx = d[0, :, 1:] - d[0, :, :-1]
    dy = d[0, 1:, :] - d[0, :-1, :]
    return mean(absolute(dx * wx.astype(d.dtype))) + mean(absolute(dy * wy.astype(d.dtype)))


def epsilon_reg(eps) -> Tensor:
    eps = as_tensor(eps)
    return tsum(eps * eps)


LOG_FIELDS = ("step", "total", "photo", "cds", "ads", "eps_reg")


def total_loss(
    rendered,
    observed,
    rendered_depth=None,
    pseudo=None,
    eps=None,
    w: LossWeights | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its unweighted per-term values.

    Depth terms are skipped when either depth map is missing; the offset
    penalty is skipped when ``eps`` is None.
    """
    w = w or LossWeights()
    photo = photometric_loss(rendered, observed, w)
    total = photo
    parts = {"photo": float(photo.data), "cds": 0.0, "ads": 0.0, "eps_reg": 0.0}
    if rendered_depth is not None and pseudo is not None and (w.cds or w.ads):
        cds = pearson_depth_loss(pseudo, rendered_depth)
        ads = edge_aware_smoothness(rendered_depth, pseudo, np.asarray(getattr(observed, "data", observed)))
        total = total + w.cds * cds + w.ads * ads
        parts["cds"] = float(cds.data)
        parts["ads"] = float(ads.data)
    if eps is not None and w.eps:
        reg = epsilon_reg(eps)
        total = total + w.eps * reg
        parts["eps_reg"] = float(reg.data)
    parts["total"] = float(total.data)
    return total, parts


class LossLog:
    """Append-only CSV of per-step loss breakdowns."""

    def __init__(self, path, extra_fields: tuple[str, ...] = ()):
        self.path = Path(path)
        self.fields = LOG_FIELDS + tuple(extra_fields)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.fields, extrasaction="ignore")
        self._writer.writeheader()

    def write(self, step: int, parts: dict) -> None:
        row = {"step": step, **{k: f"{v:.9g}" if isinstance(v, float) else v for k, v in parts.items()}}
        self._writer.writerow(row)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]
