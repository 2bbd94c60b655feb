"""Checkpoint files: a binary PLY of the Gaussian pairs followed by a tagged blob.

Layout::

    PLY header (ASCII), comment line ``uwsplat checkpoint <version>``
    N vertices x 18 little-endian float32 properties
    b"UWSB" | u32 version
    repeated sections: 4-byte ASCII tag | u32 payload length | payload
    terminating section b"END!" with length 0

Section payloads (all little-endian):

    BNDS  4 x f32: center xyz, extent
    SDMW  u32 count, then per tensor: u16 name length, UTF-8 name,
          u8 ndim, ndim x u32 dims, f32 data (row-major)
    WATR  u32 count, then per frame: i32 t, 9 x f32 (A rgb, beta rgb, gamma rgb)
    META  UTF-8 JSON object
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import GaussianPairs, SceneBounds

VERSION = 1
BLOB_MAGIC = b"UWSB"
_SH_C0 = 0.28209479177387814

VERTEX_PROPS = (
    ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{k}" for k in range(3)]
    + [f"rot_{k}" for k in range(4)]
    + [f"intrinsic_color_logit_{k}" for k in range(3)]
)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    pairs: GaussianPairs
    sdm: dict[str, np.ndarray] = field(default_factory=dict)
    water_history: dict[int, np.ndarray] = field(default_factory=dict)
    bounds: SceneBounds | None = None
    meta: dict = field(default_factory=dict)

    def mean_water(self) -> np.ndarray | None:
        """Average (A, beta, gamma) 9-vector over the recorded frames."""
        if not self.water_history:
            return None
        return np.mean(np.stack(list(self.water_history.values())), axis=0)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<I", len(payload)) + payload


def save_checkpoint(path, pairs: GaussianPairs, sdm=None, water_history=None, bounds=None, meta=None) -> None:
    n = len(pairs)
    colors = pairs.colors()
    cols = [
        pairs.positions.data,
        (colors - 0.5) / _SH_C0,
        pairs.opacity_logits.data.reshape(n, 1),
        pairs.log_scales.data,
        pairs.rotations.data,
        pairs.color_logits.data,
    ]
    widths = (3, 3, 1, 3, 4, 3)
    verts = np.concatenate([np.asarray(c, dtype="<f4").reshape(n, w) for c, w in zip(cols, widths)], axis=1)

    header = ["ply", "format binary_little_endian 1.0", f"comment uwsplat checkpoint {VERSION}", f"element vertex {n}"]
    header += [f"property float {p}" for p in VERTEX_PROPS]
    header.append("end_header")

    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    buf.write(np.ascontiguousarray(verts, dtype="<f4").tobytes())
    buf.write(BLOB_MAGIC + struct.pack("<I", VERSION))
    if bounds is not None:
        buf.write(_section(b"BNDS", np.array([*bounds.center, bounds.extent], dtype="<f4").tobytes()))
    if sdm:
        body = io.BytesIO()
        body.write(struct.pack("<I", len(sdm)))
        for name in sorted(sdm):
            arr = np.asarray(sdm[name], dtype="<f4")
            raw = name.encode("utf-8")
            body.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            body.write(np.ascontiguousarray(arr).tobytes())
        buf.write(_section(b"SDMW", body.getvalue()))
    if water_history:
        body = io.BytesIO()
        body.write(struct.pack("<I", len(water_history)))
        for t in sorted(water_history):
            body.write(struct.pack("<i", int(t)))
            body.write(np.asarray(water_history[t], dtype="<f4").reshape(9).tobytes())
        buf.write(_section(b"WATR", body.getvalue()))
    if meta:
        buf.write(_section(b"META", json.dumps(meta, sort_keys=True).encode("utf-8")))
    buf.write(_section(b"END!", b""))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise CheckpointError(f"{path}: not a PLY checkpoint")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if f"comment uwsplat checkpoint {VERSION}" not in header:
        raise CheckpointError(f"{path}: unsupported checkpoint version or foreign PLY")
    if "format binary_little_endian 1.0" not in header:
        raise CheckpointError(f"{path}: only binary little-endian PLY is supported")
    props = [ln.split()[-1] for ln in header if ln.startswith("property")]
    if props != VERTEX_PROPS:
        raise CheckpointError(f"{path}: unexpected vertex properties")
    n = next(int(ln.split()[-1]) for ln in header if ln.startswith("element vertex"))

    rd = _Reader(data, end + len(b"end_header\n"))
    verts = np.frombuffer(rd.take(4 * len(VERTEX_PROPS) * n), dtype="<f4").reshape(n, len(VERTEX_PROPS))
    verts = verts.astype(np.float32)
    if rd.take(4) != BLOB_MAGIC:
        raise CheckpointError(f"{path}: bad blob magic")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: blob version {version} != {VERSION}")

    sdm: dict[str, np.ndarray] = {}
    water: dict[int, np.ndarray] = {}
    bounds = None
    meta: dict = {}
    while True:
        tag = rd.take(4)
        (length,) = rd.unpack("<I")
        sec = _Reader(rd.take(length))
        if tag == b"END!":
            break
        if tag == b"BNDS":
            v = np.frombuffer(sec.take(16), dtype="<f4").astype(np.float64)
            bounds = SceneBounds(v[:3], float(v[3]))
        elif tag == b"SDMW":
            (count,) = sec.unpack("<I")
            for _ in range(count):
                (nlen,) = sec.unpack("<H")
                name = sec.take(nlen).decode("utf-8")
                (ndim,) = sec.unpack("<B")
                shape = sec.unpack(f"<{ndim}I") if ndim else ()
                size = int(np.prod(shape)) if ndim else 1
                sdm[name] = np.frombuffer(sec.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        elif tag == b"WATR":
            (count,) = sec.unpack("<I")
            for _ in range(count):
                (t,) = sec.unpack("<i")
                water[t] = np.frombuffer(sec.take(36), dtype="<f4").astype(np.float32)
        elif tag == b"META":
            meta = json.loads(sec.take(length).decode("utf-8"))
        else:
            raise CheckpointError(f"{path}: unknown section tag {tag!r}")

    pairs = GaussianPairs(verts[:, 0:3], verts[:, 7:10], verts[:, 10:14], verts[:, 6], verts[:, 14:17])
    return Checkpoint(pairs, sdm, water, bounds, meta)
