"""Spatiotemporal degradation modelling networks.

Two branches feed the color degradation equation:

* SD: the water-parameter extractor (WPE) regresses per-frame (A, beta, gamma)
  from the observed image and its pseudo-depth weighted copy.
* TD: a brightness-feature encoder, a multiresolution hash encoding of the
  Gaussian position, a color encoder and a decoder regress a per-Gaussian
  additive offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degradation import WaterParams, degrade_color
from .numerics import (
    Tensor,
    as_tensor,
    avg_pool2,
    bilinear_sample,
    clamp,
    concat,
    depthwise_separable_conv,
    gather,
    global_avg_pool,
    matmul,
    pointwise_conv,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    tsum,
)
from .scene import CameraFrame, GaussianPairs, SceneBounds, viewpoint_distance

NET_SIZE = 128
WPE_CHANNELS = (6, 16, 32, 64)
IBF_CHANNELS = (3, 16, 16, 16)
HASH_LEVELS = 16
HASH_FEATURES = 2
HASH_BASE_RES = 16
HASH_MAX_RES = 8192
HASH_PRIMES = (1, 2654435761, 805459861)
COLOR_HIDDEN, COLOR_OUT = 16, 32
DECODER_HIDDEN = 64
BETA_FLOOR = 1e-4

SD_GROUPS = ("wpe",)
TD_GROUPS = ("ibf", "hash", "omega", "dec")


class SdmParams:
    """All learnable SDM weights, keyed ``<group>.<layer>.<kind>``."""

    def __init__(self, tensors: dict[str, np.ndarray], hash_log2_size: int | None = None, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors = {k: Tensor(v, requires_grad=True, name=k, dtype=dtype) for k, v in tensors.items()}
        table = self.tensors.get("hash.table")
        self.hash_log2_size = hash_log2_size or (int(np.log2(table.shape[1])) if table is not None else 15)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, group: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == group}

    def groups(self) -> list[str]:
        return sorted({k.split(".", 1)[0] for k in self.tensors})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], dtype=np.float32) -> "SdmParams":
        return cls(state, dtype=dtype)

    def astype(self, dtype) -> "SdmParams":
        return SdmParams(self.state_dict(), self.hash_log2_size, dtype)

    @classmethod
    def init(cls, seed: int = 0, hash_log2_size: int = 15, dtype=np.float32) -> "SdmParams":
        rng = np.random.default_rng(seed)

        def uni(shape, fan_in, gain=1.0):
            bound = gain / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        t: dict[str, np.ndarray] = {}
        for k, (ci, co) in enumerate(zip(WPE_CHANNELS[:-1], WPE_CHANNELS[1:])):
            t[f"wpe.b{k}.dw"] = uni((ci, 3, 3), 9)
            t[f"wpe.b{k}.pw"] = uni((co, ci), ci)
            t[f"wpe.b{k}.bias"] = np.zeros(co)
        flat = WPE_CHANNELS[-1] * (NET_SIZE // 8) ** 2
        t["wpe.head.w"] = uni((9, flat), flat)
        t["wpe.head.b"] = np.zeros(9)

        for k, (ci, co) in enumerate(zip(IBF_CHANNELS[:-1], IBF_CHANNELS[1:])):
            t[f"ibf.s{k}.dw"] = uni((ci, 3, 3), 9)
            t[f"ibf.s{k}.pw"] = uni((co, ci), ci)
            t[f"ibf.s{k}.bias"] = np.zeros(co)
            if ci != co:
                t[f"ibf.s{k}.skip"] = uni((co, ci), ci)

        t["hash.table"] = rng.uniform(-1e-4, 1e-4, size=(HASH_LEVELS, 2**hash_log2_size, HASH_FEATURES))

        t["omega.l0.w"] = uni((COLOR_HIDDEN, 3), 3)
        t["omega.l0.b"] = np.zeros(COLOR_HIDDEN)
        t["omega.l1.w"] = uni((COLOR_OUT, COLOR_HIDDEN), COLOR_HIDDEN)
        t["omega.l1.b"] = np.zeros(COLOR_OUT)

        d_in = IBF_CHANNELS[-1] * 2 + HASH_LEVELS * HASH_FEATURES + COLOR_OUT
        t["dec.l0.w"] = uni((DECODER_HIDDEN, d_in), d_in)
        t["dec.l0.b"] = np.zeros(DECODER_HIDDEN)
        t["dec.l1.w"] = uni((DECODER_HIDDEN, DECODER_HIDDEN), DECODER_HIDDEN)
        t["dec.l1.b"] = np.zeros(DECODER_HIDDEN)
        # zero output layer: the offset starts at exactly 0
        t["dec.l2.w"] = np.zeros((3, DECODER_HIDDEN))
        t["dec.l2.b"] = np.zeros(3)
        return cls(t, hash_log2_size, dtype)


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - w
    m[np.arange(n_out), i1] += w
    return m


def resize_bilinear(img: np.ndarray, height: int = NET_SIZE, width: int = NET_SIZE) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a [C, H, W] array."""
    img = np.asarray(img)
    if img.shape[1:] == (height, width):
        return img.astype(np.float32)
    rh = _resize_matrix(height, img.shape[1])
    rw = _resize_matrix(width, img.shape[2])
    return (rh @ img.astype(np.float64) @ rw.T).astype(np.float32)


@dataclass
class FrameInputs:
    """Network-resolution copies of one frame's observations."""

    image: np.ndarray  # [3, 128, 128]
    pseudo_depth: np.ndarray  # [1, 128, 128]

    @classmethod
    def from_frame(cls, image, pseudo_depth) -> "FrameInputs":
        img = resize_bilinear(image)
        if pseudo_depth is None:
            pd = np.zeros((1,) + img.shape[1:], dtype=np.float32)
        else:
            pd = np.clip(resize_bilinear(pseudo_depth), 0, 1)
        return cls(img, pd)


# ---------------------------------------------------------------------------
# SD branch
# ---------------------------------------------------------------------------


def wpe_raw(x: np.ndarray, sdm: SdmParams) -> Tensor:
    """WPE forward on a [6, 128, 128] input, returning the 9 raw head outputs."""
    h = as_tensor(np.asarray(x, dtype=sdm.dtype))
    for k in range(len(WPE_CHANNELS) - 1):
        h = relu(depthwise_separable_conv(h, sdm[f"wpe.b{k}.dw"], sdm[f"wpe.b{k}.pw"], sdm[f"wpe.b{k}.bias"]))
        h = avg_pool2(h)
    flat = reshape(h, (-1, 1))
    return reshape(matmul(sdm["wpe.head.w"], flat), (9,)) + sdm["wpe.head.b"]


def water_from_raw(raw: Tensor) -> WaterParams:
    return WaterParams(
        A=sigmoid(raw[0:3]),
        beta=softplus(raw[3:6]) + BETA_FLOOR,
        gamma=softplus(raw[6:9]) + BETA_FLOOR,
    )


def predict_water(inputs: FrameInputs, sdm: SdmParams) -> WaterParams:
    """Water parameters for one frame from the image and its depth-weighted copy."""
    enhanced = inputs.pseudo_depth * inputs.image
    x = np.concatenate([enhanced, inputs.image], axis=0)
    return water_from_raw(wpe_raw(x, sdm))


# ---------------------------------------------------------------------------
# TD branch
# ---------------------------------------------------------------------------


def encode_brightness(image: np.ndarray, sdm: SdmParams) -> tuple[Tensor, Tensor]:
    """Low-resolution brightness map F_l [16, 16, 16] and its global mean f_g [16]."""
    h = as_tensor(np.asarray(image, dtype=sdm.dtype))
    for k in range(len(IBF_CHANNELS) - 1):
        y = depthwise_separable_conv(h, sdm[f"ibf.s{k}.dw"], sdm[f"ibf.s{k}.pw"], sdm[f"ibf.s{k}.bias"])
        skip = sdm.tensors.get(f"ibf.s{k}.skip")
        y = y + (pointwise_conv(h, skip) if skip is not None else h)
        h = avg_pool2(relu(y))
    return h, global_avg_pool(h)


def hash_level_resolutions(levels: int = HASH_LEVELS) -> np.ndarray:
    growth = np.exp((np.log(HASH_MAX_RES) - np.log(HASH_BASE_RES)) / (levels - 1))
    return np.floor(HASH_BASE_RES * growth ** np.arange(levels) + 1e-9).astype(np.int64)


_CORNERS = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.int64)


def hash_indices(unit_xyz: np.ndarray, table_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Hashed corner indices [N, L, 8] and trilinear weights [N, L, 8] for points in [0, 1]^3."""
    res = hash_level_resolutions()
    pos = unit_xyz[:, None, :].astype(np.float64) * res[None, :, None]  # [N, L, 3]
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    corner = base[:, :, None, :] + _CORNERS[None, None]  # [N, L, 8, 3]
    c = corner.astype(np.uint64)
    h = c[..., 0] * np.uint64(HASH_PRIMES[0])
    h ^= c[..., 1] * np.uint64(HASH_PRIMES[1])
    h ^= c[..., 2] * np.uint64(HASH_PRIMES[2])
    idx = (h % np.uint64(table_size)).astype(np.int64)
    f = frac[:, :, None, :]
    w = np.where(_CORNERS[None, None] == 1, f, 1.0 - f).prod(axis=-1)
    return idx, w


def hash_encode(positions, bounds: SceneBounds, sdm: SdmParams) -> Tensor:
    """Multiresolution hash features [N, 32]; differentiable w.r.t. the tables only."""
    xyz = np.asarray(positions.data if isinstance(positions, Tensor) else positions)
    unit = bounds.normalize(xyz)
    table = sdm["hash.table"]
    levels, size, feats = table.shape
    idx, w = hash_indices(unit, size)
    flat = idx + (np.arange(levels) * size)[None, :, None]
    rows = gather(reshape(table, (levels * size, feats)), flat.reshape(-1))
    rows = reshape(rows, (len(xyz), levels, 8, feats))
    out = tsum(rows * w[..., None].astype(table.dtype), axis=2)
    return reshape(out, (len(xyz), levels * feats))


def _linear(x: Tensor, sdm: SdmParams, name: str) -> Tensor:
    return matmul(x, sdm[f"{name}.w"].T) + sdm[f"{name}.b"]


def color_encode(colors, sdm: SdmParams) -> Tensor:
    return _linear(relu(_linear(as_tensor(colors), sdm, "omega.l0")), sdm, "omega.l1")


def decode_offset(features: Tensor, sdm: SdmParams) -> Tensor:
    h = relu(_linear(features, sdm, "dec.l0"))
    h = relu(_linear(h, sdm, "dec.l1"))
    return _linear(h, sdm, "dec.l2")


def screen_uv(positions, cam: CameraFrame) -> Tensor:
    """Projected centres normalized by image size, [N, 2]; depth clamped at the near plane."""
    positions = as_tensor(positions)
    p = matmul(positions, cam.R.T.astype(positions.dtype)) + cam.T.astype(positions.dtype)
    z = clamp(p[:, 2], 0.01, None)
    u = (cam.fx * p[:, 0] / z + cam.cx) / cam.width
    v = (cam.fy * p[:, 1] / z + cam.cy) / cam.height
    return stack([u, v], axis=1)


def predict_epsilon(positions, colors, cam: CameraFrame, F_l: Tensor, f_g: Tensor, bounds: SceneBounds, sdm: SdmParams) -> Tensor:
    """Per-Gaussian additive offsets [N, 3] for the frame seen by ``cam``."""
    n = len(positions.data if isinstance(positions, Tensor) else positions)
    f_l = bilinear_sample(F_l, screen_uv(positions, cam))
    f_glob = reshape(f_g, (1, -1)) * np.ones((n, 1), dtype=f_g.dtype)
    feats = concat([f_l, f_glob, hash_encode(positions, bounds, sdm), color_encode(colors, sdm)], axis=1)
    return decode_offset(feats, sdm)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

IDENTITY_WATER = WaterParams(np.full(3, 0.5), np.zeros(3), np.zeros(3))


@dataclass
class FrameColors:
    colors: Tensor
    water: WaterParams
    eps: Tensor | None


def degraded_colors_for_frame(
    pairs: GaussianPairs,
    cam: CameraFrame,
    inputs: FrameInputs,
    sdm: SdmParams,
    bounds: SceneBounds,
    *,
    use_sd: bool = True,
    use_td: bool = True,
    detach_sd: bool = False,
    detach_td: bool = False,
) -> FrameColors:
    """Degraded colors of every pair for one frame, plus the water and offsets used.

    ``use_*`` switch a branch off entirely (identity water or zero offset);
    ``detach_*`` keep the branch in the forward pass but block its gradients.
    """
    intrinsic = sigmoid(pairs.color_logits)
    if use_sd:
        water = predict_water(inputs, sdm)
        if detach_sd:
            water = water.detach()
    else:
        water = IDENTITY_WATER
    eps = None
    if use_td:
        F_l, f_g = encode_brightness(inputs.image, sdm)
        eps = predict_epsilon(pairs.positions, intrinsic, cam, F_l, f_g, bounds, sdm)
        if detach_td:
            eps = eps.detach()
    r = viewpoint_distance(pairs.positions, cam)
    colors = degrade_color(intrinsic, water, r, eps)
    return FrameColors(colors, water, eps)
