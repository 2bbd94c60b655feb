"""Differentiable splatting: EWA projection and exact front-to-back compositing.

Pixels are evaluated exactly (no tiles) but only inside each splat's 3-sigma
bounding box.  Every (splat, pixel) pair inside a box becomes one row; rows
are sorted by pixel and then by depth, so transmittance is an exclusive
running sum of ``log(1 - alpha)`` within each pixel's segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    as_tensor,
    clamp,
    concat,
    exp,
    gather,
    log,
    matmul,
    reshape,
    scatter_add,
    segment_cumsum_exclusive,
    sigmoid,
    sqrt,
    stack,
    swap_last,
    transpose,
    tsum,
)
from .scene import CameraFrame

NEAR = 0.01
DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0


@dataclass
class Splats:
    """Screen-space splats for the Gaussians that survived near-plane culling.

    ``index`` maps each row back to the Gaussian it came from.  ``cov2d`` holds
    the dilated covariance entries (xx, xy, yy).
    """

    index: np.ndarray
    mean2d: Tensor
    cov2d: Tensor
    depth: Tensor
    color: Tensor
    opacity: Tensor

    def __len__(self) -> int:
        return len(self.index)


def quat_to_rotmat_t(q: Tensor) -> Tensor:
    """[M, 4] (w, x, y, z) quaternions, normalized on the fly, to [M, 3, 3]."""
    q = q / sqrt(tsum(q * q, axis=1, keepdims=True))
    w, x, y, z = (q[:, k] for k in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return stack([stack(r, axis=1) for r in rows], axis=1)


def project_gaussians(positions, log_scales, rotations, opacities, colors, cam: CameraFrame) -> Splats:
    """Project Gaussians into ``cam``; Gaussians with camera z <= 0.01 are culled.

    ``opacities`` are decoded values in (0, 1) and ``colors`` the per-frame
    colors to splat.  All outputs are differentiable w.r.t. the inputs.
    """
    positions = as_tensor(positions)
    dt = positions.dtype
    R = cam.R.astype(dt)
    T = cam.T.astype(dt)
    z_all = positions.data @ R[2] + T[2]
    index = np.flatnonzero(z_all > NEAR)

    mu = gather(positions, index)
    p = matmul(mu, R.T) + T
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    inv_z = 1.0 / z
    mean2d = stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)

    rot = quat_to_rotmat_t(gather(as_tensor(rotations, like=positions), index))
    scale = exp(gather(as_tensor(log_scales, like=positions), index))
    m = rot * reshape(scale, (-1, 1, 3))
    sigma = matmul(m, swap_last(m))

    # perspective Jacobian rows composed with the camera rotation
    a0 = cam.fx * inv_z
    b0 = -cam.fx * x * inv_z * inv_z
    a1 = cam.fy * inv_z
    b1 = -cam.fy * y * inv_z * inv_z
    col = lambda t: reshape(t, (-1, 1))  # noqa: E731
    row0 = col(a0) * R[0] + col(b0) * R[2]
    row1 = col(a1) * R[1] + col(b1) * R[2]
    jw = stack([row0, row1], axis=1)
    cov = matmul(matmul(jw, sigma), swap_last(jw))
    cov2d = stack([cov[:, 0, 0] + DILATION, cov[:, 0, 1], cov[:, 1, 1] + DILATION], axis=1)

    return Splats(
        index=index,
        mean2d=mean2d,
        cov2d=cov2d,
        depth=z,
        color=gather(as_tensor(colors, like=positions), index),
        opacity=gather(as_tensor(opacities, like=positions), index),
    )


@dataclass
class RenderOutput:
    image: Tensor  # [3, H, W]
    depth: Tensor  # [1, H, W]
    alpha: Tensor  # [1, H, W]
    n_pairs: int = 0


def _pair_layout(u, v, cxx, cyy, depth, width, height):
    """Integer bookkeeping for the (splat, pixel) rows; no gradients involved."""
    m = len(u)
    rx = 3.0 * np.sqrt(np.maximum(cxx, 0))
    ry = 3.0 * np.sqrt(np.maximum(cyy, 0))
    # pixel j has its centre at j + 0.5
    x0 = np.maximum(np.ceil(u - rx - 0.5), 0)
    x1 = np.minimum(np.floor(u + rx - 0.5), width - 1)
    y0 = np.maximum(np.ceil(v - ry - 0.5), 0)
    y1 = np.minimum(np.floor(v + ry - 0.5), height - 1)
    ok = np.isfinite(x0 + x1 + y0 + y1)
    nx = np.where(ok, np.maximum(x1 - x0 + 1, 0), 0).astype(np.int64)
    ny = np.where(ok, np.maximum(y1 - y0 + 1, 0), 0).astype(np.int64)
    counts = nx * ny
    total = int(counts.sum())
    sid = np.repeat(np.arange(m), counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxs = nx[sid]
    px = x0[sid].astype(np.int64) + offset % np.maximum(nxs, 1)
    py = y0[sid].astype(np.int64) + offset // np.maximum(nxs, 1)
    pixel = py * width + px

    rank = np.empty(m, dtype=np.int64)
    rank[np.argsort(depth, kind="stable")] = np.arange(m)
    order = np.argsort(pixel * max(m, 1) + rank[sid], kind="stable")
    return sid[order], pixel[order], px[order], py[order]


def render(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Alpha-composite ``splats`` front to back into image, depth and alpha maps."""
    dt = splats.mean2d.dtype
    bg = np.asarray(background, dtype=dt).reshape(3, 1, 1)
    n_pix = width * height
    m = len(splats)

    if m:
        c = splats.cov2d
        cxx, cxy, cyy = c[:, 0], c[:, 1], c[:, 2]
        det = cxx * cyy - cxy * cxy
        conic = stack([cyy / det, -cxy / det, cxx / det], axis=1)
        table = concat(
            [splats.mean2d, conic, reshape(splats.opacity, (-1, 1)), reshape(splats.depth, (-1, 1)), splats.color],
            axis=1,
        )
        cd = c.data
        sid, pixel, px, py = _pair_layout(
            splats.mean2d.data[:, 0], splats.mean2d.data[:, 1], cd[:, 0], cd[:, 2], splats.depth.data, width, height
        )
    else:
        sid = np.zeros(0, dtype=np.int64)

    if len(sid) == 0:
        zeros = Tensor(np.zeros((1, height, width), dtype=dt))
        image = Tensor(np.broadcast_to(bg, (3, height, width)).copy())
        return RenderOutput(image, zeros, Tensor(np.zeros((1, height, width), dtype=dt)), 0)

    rows = gather(table, sid)  # [P, 9]
    dx = (px.astype(dt) + 0.5) - rows[:, 0]
    dy = (py.astype(dt) + 0.5) - rows[:, 1]
    power = -0.5 * (rows[:, 2] * dx * dx + 2.0 * rows[:, 3] * dx * dy + rows[:, 4] * dy * dy)
    alpha = clamp(rows[:, 5] * exp(power), None, ALPHA_MAX)
    alpha = alpha * (alpha.data >= ALPHA_MIN).astype(dt)

    trans = exp(segment_cumsum_exclusive(log(1.0 - alpha), pixel))
    weight = reshape(alpha * trans, (-1, 1))
    contrib = concat([weight * rows[:, 7:10], weight, weight * reshape(rows[:, 6], (-1, 1))], axis=1)
    acc = scatter_add(contrib, pixel, n_pix)  # [HW, 5]

    planes = reshape(transpose(acc), (5, height, width))
    alpha_map = planes[3:4]
    image = planes[0:3] + bg * (1.0 - alpha_map)
    depth = planes[4:5] / (alpha_map + 1e-8)
    return RenderOutput(image, depth, alpha_map, len(sid))


def render_gaussians(pairs, colors, cam: CameraFrame, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Project and composite ``pairs`` with per-Gaussian ``colors`` [N, 3]."""
    splats = project_gaussians(
        pairs.positions, pairs.log_scales, pairs.rotations, sigmoid(pairs.opacity_logits), colors, cam
    )
    return render(splats, cam.width, cam.height, background)
