"""Synthetic underwater datasets: procedural scenes, on-disk layout and loading.

Directory layout::

    images_degraded/<name>.png   observed frames (8-bit RGB)
    images_clean/<name>.png      water-free renders (8-bit RGB)
    depth/<name>.png             16-bit range map, metres = value * depth_scale
    pseudo_depth/<name>.png      16-bit relative depth in [0, 1]
    sparse/0/                    COLMAP text model (cameras, images, points3D)
    gt.ply                       ground-truth Gaussians as a checkpoint
    manifest.json                cameras, splits, ground-truth water, checksums
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import qmc

from .degradation import CAUSTIC_PRESETS, CausticConfig, WaterParams, apply_water_image, modulate_caustics, water_preset
from .renderer import render_gaussians
from .scene import CameraFrame, GaussianPairs, SceneBounds, look_at, quat_to_rotmat, rotmat_to_quat, save_checkpoint, write_colmap

LAYOUTS = ("textured_wall", "terraced_boxes", "color_grid")
MANIFEST_VERSION = 1
TEST_EVERY = 8
PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.70, 0.20],
        [0.15, 0.25, 0.85],
        [0.90, 0.85, 0.15],
        [0.15, 0.80, 0.80],
        [0.80, 0.20, 0.75],
        [0.92, 0.92, 0.92],
        [0.45, 0.45, 0.45],
    ]
)


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticSceneSpec:
    layout: str = "textured_wall"
    gaussian_count: int = 200
    frames: int = 40
    width: int = 128
    height: int = 96
    focal: float = 1.0  # focal length in units of image width
    arc_degrees: float = 50.0
    dolly: float = 0.35
    water: object = "S1-A-Med"  # preset name or {"A": [...], "beta": [...], "gamma": [...]}
    caustic: object = "A"  # preset letter, CausticConfig dict, or None
    pseudo_noise: float = 0.05
    point_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {LAYOUTS}")
        if self.frames < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if self.gaussian_count < 1 or self.width < 2 or self.height < 2:
            raise ValueError("gaussian_count >= 1 and image size >= 2x2 required")
        if self.pseudo_noise < 0 or self.point_noise < 0:
            raise ValueError("noise levels must be >= 0")
        self.water_params().validate()
        self.caustic_config()

    def water_params(self) -> WaterParams:
        if isinstance(self.water, str):
            return water_preset(self.water)
        if isinstance(self.water, WaterParams):
            return self.water
        if isinstance(self.water, dict):
            return WaterParams(*(np.asarray(self.water[k], dtype=np.float64) for k in ("A", "beta", "gamma")))
        raise ValueError(f"cannot interpret water specification {self.water!r}")

    def caustic_config(self) -> CausticConfig | None:
        c = self.caustic
        if c is None or c == "none":
            return None
        if isinstance(c, CausticConfig):
            return c
        if isinstance(c, str):
            if c not in CAUSTIC_PRESETS:
                raise ValueError(f"unknown caustic preset {c!r}")
            return CAUSTIC_PRESETS[c]
        if isinstance(c, dict):
            return CausticConfig.from_dict(c)
        raise ValueError(f"cannot interpret caustic specification {c!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.water, WaterParams):
            v = self.water.vector()
            d["water"] = {"A": v[0:3].tolist(), "beta": v[3:6].tolist(), "gamma": v[6:9].tolist()}
        if isinstance(self.caustic, CausticConfig):
            d["caustic"] = self.caustic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene spec keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# procedural scenes
# ---------------------------------------------------------------------------


def _texture(xy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth multi-hue texture: a few random sinusoids per channel."""
    out = np.full((len(xy), 3), 0.5)
    for ch in range(3):
        for _ in range(3):
            k = rng.normal(size=2) * 5.0
            out[:, ch] += 0.18 * np.sin(xy @ k + rng.uniform(0, 2 * np.pi))
    return np.clip(out, 0.05, 0.95)


def _trajectory(spec: SyntheticSceneSpec, target: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Forward-facing arc around ``target`` with a gentle dolly towards it.

    Frames are placed at equal arc length along the path so consecutive spacing is even.
    """
    half = np.radians(spec.arc_degrees) / 2
    radius = float(target[2])

    def eye_at(u):
        u = np.asarray(u, dtype=np.float64)[..., None]
        theta = -half + 2 * half * u
        d = radius - spec.dolly * 0.5 * (1 - np.cos(2 * np.pi * u))
        eye = target + d * np.concatenate([np.sin(theta), np.zeros_like(theta), -np.cos(theta)], axis=-1)
        eye[..., 1] += 0.03 * np.sin(2 * np.pi * u[..., 0])
        return eye

    dense = np.linspace(0.0, 1.0, 64 * spec.frames + 1)
    seg = np.linalg.norm(np.diff(eye_at(dense), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    u = np.interp(np.linspace(0.0, arc[-1], spec.frames), arc, dense)
    return [look_at(e, target) for e in eye_at(u)]


def synth_scene(spec: SyntheticSceneSpec) -> tuple[GaussianPairs, list[CameraFrame]]:
    """Ground-truth Gaussians and camera path; the farthest camera-Gaussian distance is 1."""
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussian_count
    half_w, half_h = 0.8, 0.6
    sampler = qmc.Halton(d=2, scramble=True, seed=spec.seed)
    uv = sampler.random(n)
    xy = np.stack([(uv[:, 0] * 2 - 1) * half_w, (uv[:, 1] * 2 - 1) * half_h], axis=1)
    spacing = np.sqrt(4 * half_w * half_h / n)

    if spec.layout == "textured_wall":
        z = 0.8 + 0.25 * (xy[:, 0] / half_w) + 0.04 * np.sin(6 * xy[:, 1]) * np.cos(5 * xy[:, 0])
        colors = _texture(xy, rng)
    elif spec.layout == "terraced_boxes":
        bands = np.clip(((xy[:, 0] / half_w + 1) / 2 * 4).astype(int), 0, 3)
        z = 0.6 + 0.2 * bands + 0.03 * np.sin(8 * xy[:, 1])
        base = np.array([[0.76, 0.66, 0.48], [0.55, 0.50, 0.42], [0.62, 0.58, 0.36], [0.40, 0.45, 0.50]])
        colors = np.clip(base[bands] + 0.6 * (_texture(xy, rng) - 0.5), 0.05, 0.95)
    else:
        cols, rows = 4, 2
        cx = np.clip(((xy[:, 0] / half_w + 1) / 2 * cols).astype(int), 0, cols - 1)
        cy = np.clip(((xy[:, 1] / half_h + 1) / 2 * rows).astype(int), 0, rows - 1)
        # pin the first Gaussians to cell centres so every palette entry appears
        for k in range(min(n, cols * rows)):
            cx[k], cy[k] = k % cols, k // cols
            xy[k] = [((cx[k] + 0.5) / cols * 2 - 1) * half_w, ((cy[k] + 0.5) / rows * 2 - 1) * half_h]
        z = 0.8 + 0.2 * (xy[:, 0] / half_w)
        colors = PALETTE[cy * cols + cx]

    positions = np.concatenate([xy, z[:, None]], axis=1)
    target = np.array([0.0, 0.0, float(np.median(z))])
    poses = _trajectory(spec, target)

    centers = np.stack([-R.T @ T for R, T in poses])
    far = np.max(np.linalg.norm(positions[None] - centers[:, None], axis=-1))
    s = 1.0 / far
    positions = positions * s
    spacing *= s
    scales = np.tile([1.0 * spacing, 1.0 * spacing, 0.15 * spacing], (n, 1))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opac = np.full(n, 0.95)
    gt = GaussianPairs.from_values(positions, scales, rot, opac, colors)

    focal = spec.focal * spec.width
    frames = []
    for t, (R, T) in enumerate(poses):
        frames.append(
            CameraFrame(focal, focal, spec.width / 2, spec.height / 2, R, T * s, spec.width, spec.height, t=t, name=f"frame_{t:04d}.png")
        )
    return gt, frames


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def range_map(z_depth: np.ndarray, cam: CameraFrame) -> np.ndarray:
    """Convert camera-space z [1, H, W] to distance along each pixel ray."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    norm = np.sqrt(1.0 + u[None, :] ** 2 + v[:, None] ** 2)
    return np.asarray(z_depth, dtype=np.float64) * norm[None]


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_png_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.transpose(_to_u8(img), (1, 2, 0))).save(path, optimize=False)


def write_png16(path: Path, values: np.ndarray) -> None:
    arr = np.round(np.clip(values, 0, 65535)).astype(np.uint16)
    Image.fromarray(arr).save(path, optimize=False)  # uint16 maps to mode I;16


def read_png(path: Path) -> np.ndarray:
    """[C, H, W] float32 in [0, 1] for 8-bit files; raw integers for 16-bit."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64)[None]
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (np.transpose(arr[:, :, :3], (2, 0, 1)).astype(np.float32)) / 255.0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def normalize_depth(d: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    valid = np.ones(d.shape, bool) if valid is None else valid
    if not valid.any():
        return np.zeros_like(d)
    lo, hi = d[valid].min(), d[valid].max()
    return np.where(valid, (d - lo) / max(hi - lo, 1e-12), 0.0)


def _point_cloud(gt: GaussianPairs, frames, degraded, spec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Jittered Gaussian centres with colors averaged from the degraded frames."""
    pos = gt.positions.data.astype(np.float64)
    pts = pos + rng.normal(scale=spec.point_noise * 1.0, size=pos.shape)
    acc = np.zeros((len(pts), 3))
    cnt = np.zeros(len(pts))
    for cam, img in zip(frames, degraded):
        pc = pts @ cam.R.T + cam.T
        ok = pc[:, 2] > 1e-3
        u = np.floor(cam.fx * pc[:, 0] / np.where(ok, pc[:, 2], 1) + cam.cx).astype(int)
        v = np.floor(cam.fy * pc[:, 1] / np.where(ok, pc[:, 2], 1) + cam.cy).astype(int)
        ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        acc[ok] += img[:, v[ok], u[ok]].T
        cnt[ok] += 1
    col = np.where(cnt[:, None] > 0, acc / np.maximum(cnt, 1)[:, None], 0.5)
    return pts, col


def generate_dataset(spec: SyntheticSceneSpec, out_dir) -> dict:
    """Render, degrade and write a complete synthetic dataset; returns the manifest."""
    out = Path(out_dir)
    for sub in ("images_degraded", "images_clean", "depth", "pseudo_depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    water = spec.water_params()
    caustic = spec.caustic_config()
    gt, frames = synth_scene(spec)
    rng = np.random.default_rng(spec.seed + 1)

    records = []
    degraded_all = []
    for cam in frames:
        r = render_gaussians(gt, gt.colors(), cam)
        clean = np.asarray(r.image.data, dtype=np.float64)
        z = np.asarray(r.depth.data, dtype=np.float64)
        dist = range_map(z, cam)
        lit = modulate_caustics(clean, z, cam, caustic, cam.t) if caustic is not None else clean
        degraded = np.clip(np.asarray(apply_water_image(lit, dist, water).data, dtype=np.float64), 0, 1)
        degraded_all.append(_to_u8(degraded).astype(np.float64) / 255)

        valid = np.asarray(r.alpha.data)[0] > 0.5
        pseudo = normalize_depth(dist[0], valid)
        if spec.pseudo_noise > 0:
            pseudo = pseudo * np.exp(rng.normal(scale=spec.pseudo_noise, size=pseudo.shape))
        pseudo = np.clip(pseudo, 0, 1)
        scale = max(float(dist.max()), 1e-6) / 65535.0

        stem = Path(cam.name).stem
        paths = {
            "image": f"images_degraded/{stem}.png",
            "clean": f"images_clean/{stem}.png",
            "depth": f"depth/{stem}.png",
            "pseudo_depth": f"pseudo_depth/{stem}.png",
        }
        write_png_rgb(out / paths["image"], degraded)
        write_png_rgb(out / paths["clean"], clean)
        write_png16(out / paths["depth"], dist[0] / scale)
        write_png16(out / paths["pseudo_depth"], pseudo * 65535.0)
        records.append(
            {
                "name": cam.name,
                "t": cam.t,
                "split": "test" if cam.t % TEST_EVERY == 0 else "train",
                **paths,
                "depth_scale": scale,
                "qvec": rotmat_to_quat(cam.R).tolist(),
                "tvec": cam.T.tolist(),
                "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
                "size": [cam.width, cam.height],
            }
        )

    pts, col = _point_cloud(gt, frames, degraded_all, spec, rng)
    write_colmap(out / "sparse" / "0", frames, pts, col)

    v = water.vector()
    save_checkpoint(
        out / "gt.ply",
        gt,
        water_history={f.t: v for f in frames},
        bounds=SceneBounds.from_points(gt.positions.data),
        meta={"kind": "ground_truth", "seed": spec.seed},
    )
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": spec.to_dict(),
        "water": {"A": v[0:3].tolist(), "beta": v[3:6].tolist(), "gamma": v[6:9].tolist()},
        "caustic": caustic.to_dict() if caustic is not None else None,
        "depth_kind": "range",
        "gaussians": {
            "positions": gt.positions.data.tolist(),
            "log_scales": gt.log_scales.data.tolist(),
            "rotations": gt.rotations.data.tolist(),
            "opacity_logits": gt.opacity_logits.data.tolist(),
            "color_logits": gt.color_logits.data.tolist(),
        },
        "frames": records,
        "checksums": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    frames: list[CameraFrame]
    manifest: dict
    records: dict[int, dict] = field(default_factory=dict)

    @property
    def train(self) -> list[CameraFrame]:
        return [f for f in self.frames if self.records[f.t]["split"] == "train"]

    @property
    def test(self) -> list[CameraFrame]:
        return [f for f in self.frames if self.records[f.t]["split"] == "test"]

    def water(self) -> WaterParams | None:
        w = self.manifest.get("water")
        return WaterParams.from_vector(w["A"] + w["beta"] + w["gamma"]) if w else None

    def clean_image(self, frame: CameraFrame) -> np.ndarray:
        rec = self.records[frame.t]
        if "clean" not in rec:
            raise DatasetError(f"frame {frame.name} has no clean ground truth")
        return _read_checked(self.root, rec["clean"])

    def depth(self, frame: CameraFrame) -> np.ndarray:
        rec = self.records[frame.t]
        return (_read_checked(self.root, rec["depth"]) * rec["depth_scale"]).astype(np.float32)

    def gt_gaussians(self) -> GaussianPairs | None:
        g = self.manifest.get("gaussians")
        if not g:
            return None
        return GaussianPairs(*(np.asarray(g[k]) for k in ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")))

    def __iter__(self):
        # unpacks as (frames, manifest)
        return iter((self.frames, self.manifest))


def _read_checked(root: Path, rel: str) -> np.ndarray:
    p = root / rel
    if not p.is_file():
        raise DatasetError(f"missing file: {p}")
    try:
        return read_png(p)
    except Exception as exc:  # PIL raises several types for corrupt files
        raise DatasetError(f"cannot decode {p}: {exc}") from exc


def load_dataset(directory, pseudo_depth_dir=None, verify: bool = True) -> Dataset:
    """Load a dataset directory; ``pseudo_depth_dir`` overrides the stored pseudo-depth.

    External pseudo-depth files must be named like the frames (8- or 16-bit
    grayscale PNG); they are min-max normalized on load.
    """
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')}")

    if verify:
        for rel, digest in manifest.get("checksums", {}).items():
            p = root / rel
            if not p.is_file():
                raise DatasetError(f"missing file: {p}")
            if _sha256(p) != digest:
                raise DatasetError(f"checksum mismatch: {p}")

    frames = []
    records = {}
    for rec in manifest["frames"]:
        img = _read_checked(root, rec["image"])
        if pseudo_depth_dir is not None:
            ext = Path(pseudo_depth_dir) / Path(rec["name"]).with_suffix(".png").name
            raw = _read_checked(ext.parent, ext.name)
            pd = normalize_depth(raw[:1]).astype(np.float32)
        else:
            pd = (_read_checked(root, rec["pseudo_depth"]) / 65535.0).astype(np.float32)
        fx, fy, cx, cy = rec["intrinsics"]
        w, h = rec["size"]
        if img.shape != (3, h, w):
            raise DatasetError(f"{rec['image']}: expected {w}x{h} RGB, got shape {img.shape}")
        frames.append(
            CameraFrame(fx, fy, cx, cy, quat_to_rotmat(rec["qvec"]), rec["tvec"], w, h, t=rec["t"], name=rec["name"], image=img, pseudo_depth=pd)
        )
        records[rec["t"]] = rec
    return Dataset(root, frames, manifest, records)


def initial_point_cloud(directory) -> tuple[np.ndarray, np.ndarray]:
    """Sparse points and colors (in [0, 1]) from the dataset's COLMAP model."""
    from .scene import load_colmap

    _, pts, cols = load_colmap(Path(directory) / "sparse" / "0")
    return pts, cols
