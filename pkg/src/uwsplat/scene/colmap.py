"""COLMAP text-format reader and writer (cameras.txt, images.txt, points3D.txt)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .camera import CameraFrame, quat_to_rotmat, rotmat_to_quat


class ColmapParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def _numbered_lines(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing COLMAP file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            yield lineno, line.rstrip("\n")


def _read_cameras(path: Path) -> dict[int, dict]:
    cams = {}
    for lineno, line in _numbered_lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        try:
            cam_id, model, width, height = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            params = [float(v) for v in tok[4:]]
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(path, lineno, f"malformed camera line ({exc})") from None
        if model == "PINHOLE":
            if len(params) != 4:
                raise ColmapParseError(path, lineno, "PINHOLE needs 4 parameters")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ColmapParseError(path, lineno, "SIMPLE_PINHOLE needs 3 parameters")
            fx, cx, cy = params
            fy = fx
        else:
            raise ColmapParseError(path, lineno, f"unsupported camera model {model!r}")
        cams[cam_id] = dict(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    return cams


def _is_points2d_line(s: str) -> bool:
    tok = s.split()
    if len(tok) % 3:
        return False
    try:
        [float(v) for v in tok]
    except ValueError:
        return False
    return True


def _read_images(path: Path, cams: dict[int, dict]) -> list[CameraFrame]:
    lines = [(n, l) for n, l in _numbered_lines(path) if not l.lstrip().startswith("#")]
    frames = []
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        i += 1
        s = line.strip()
        if not s:
            continue
        tok = s.split()
        try:
            qvec = [float(v) for v in tok[1:5]]
            tvec = [float(v) for v in tok[5:8]]
            cam_id = int(tok[8])
            name = " ".join(tok[9:])
            if len(tok) < 10:
                raise ValueError("expected 10 fields")
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(path, lineno, f"malformed image line ({exc})") from None
        if cam_id not in cams:
            raise ColmapParseError(path, lineno, f"unknown camera id {cam_id}")
        if i < len(lines) and (not lines[i][1].strip() or _is_points2d_line(lines[i][1])):
            i += 1
        frames.append(CameraFrame(R=quat_to_rotmat(qvec), T=np.array(tvec), name=name, **cams[cam_id]))
    frames.sort(key=lambda f: f.name)
    for t, f in enumerate(frames):
        f.t = t
    return frames


def _read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    xyz, rgb = [], []
    for lineno, line in _numbered_lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        try:
            xyz.append([float(v) for v in tok[1:4]])
            rgb.append([int(v) for v in tok[4:7]])
            if len(tok) < 8:
                raise ValueError("expected at least 8 fields")
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(path, lineno, f"malformed point line ({exc})") from None
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3), np.asarray(rgb, dtype=np.float64).reshape(-1, 3) / 255.0


def load_colmap(directory) -> tuple[list[CameraFrame], np.ndarray, np.ndarray]:
    """Cameras (sorted by image name, ``t`` = rank) plus point positions and RGB in [0, 1]."""
    d = Path(directory)
    cams = _read_cameras(d / "cameras.txt")
    frames = _read_images(d / "images.txt", cams)
    points, colors = _read_points(d / "points3D.txt")
    return frames, points, colors


def _num(v) -> str:
    return repr(float(v))


def write_colmap(directory, frames: list[CameraFrame], points=None, colors=None) -> None:
    """Write PINHOLE cameras, poses and an optional point cloud in text format."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for k, f in enumerate(frames, start=1):
            fh.write(f"{k} PINHOLE {f.width} {f.height} {_num(f.fx)} {_num(f.fy)} {_num(f.cx)} {_num(f.cy)}\n")
    with open(d / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for k, f in enumerate(frames, start=1):
            q = rotmat_to_quat(f.R)
            vals = " ".join(_num(v) for v in (*q, *f.T))
            fh.write(f"{k} {vals} {k} {f.name or f'frame_{k:04d}.png'}\n\n")
    with open(d / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        if points is not None:
            rgb = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(int)
            for k, (p, c) in enumerate(zip(np.asarray(points), rgb), start=1):
                fh.write(f"{k} {_num(p[0])} {_num(p[1])} {_num(p[2])} {c[0]} {c[1]} {c[2]} 0.0\n")
