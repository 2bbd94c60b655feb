from __future__ import annotations

import json

import numpy as np
import pytest

from uwsplat.datasets import (
    LAYOUTS,
    PALETTE,
    Dataset,
    DatasetError,
    SyntheticSceneSpec,
    generate_dataset,
    initial_point_cloud,
    load_dataset,
    range_map,
    read_png,
    synth_scene,
)
from uwsplat.degradation import apply_water_image, caustic_value, backproject
from uwsplat.renderer import render_gaussians
from uwsplat.scene import load_checkpoint, load_colmap


def _small(**kw):
    base = dict(gaussian_count=60, frames=9, width=32, height=24, seed=5)
    base.update(kw)
    return SyntheticSceneSpec(**base)


def test_spec_roundtrip_and_validation(tmp_path):
    spec = _small(layout="color_grid", water={"A": [0.2, 0.3, 0.4], "beta": [1, 1, 1], "gamma": [2, 2, 2]}, caustic=None)
    assert SyntheticSceneSpec.from_dict(spec.to_dict()) == spec
    (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
    assert SyntheticSceneSpec.load(tmp_path / "s.json") == spec
    with pytest.raises(ValueError):
        SyntheticSceneSpec(layout="cave")
    with pytest.raises(ValueError):
        SyntheticSceneSpec(frames=1)
    with pytest.raises(ValueError):
        SyntheticSceneSpec.from_dict({"layuot": "color_grid"})


@pytest.mark.parametrize("layout", LAYOUTS)
def test_synth_scene_deterministic_and_normalized(layout):
    spec = _small(layout=layout)
    g1, f1 = synth_scene(spec)
    g2, f2 = synth_scene(spec)
    for k in ("positions", "log_scales", "rotations", "opacity_logits", "color_logits"):
        assert np.array_equal(getattr(g1, k).data, getattr(g2, k).data)
    assert all(np.array_equal(a.R, b.R) and np.array_equal(a.T, b.T) for a, b in zip(f1, f2))
    centers = np.stack([f.center for f in f1])
    far = np.max(np.linalg.norm(g1.positions.data[None].astype(np.float64) - centers[:, None], axis=-1))
    assert far == pytest.approx(1.0, rel=1e-5)
    assert len(g1) == 60


def test_color_grid_uses_whole_palette():
    g, _ = synth_scene(_small(layout="color_grid"))
    cols = g.colors()
    for p in PALETTE:
        assert np.min(np.max(np.abs(cols - p), axis=1)) < 1e-3


def test_trajectory_spacing_120_frames():
    _, frames = synth_scene(SyntheticSceneSpec(gaussian_count=50, frames=120, width=32, height=24))
    c = np.stack([f.center for f in frames])
    assert len({tuple(np.round(x, 9)) for x in c}) == 120
    steps = np.linalg.norm(np.diff(c, axis=0), axis=1)
    assert steps.max() <= 2 * steps.mean() and steps.min() >= 0.5 * steps.mean()


def test_generate_and_load_roundtrip(tmp_path):
    spec = _small()
    manifest = generate_dataset(spec, tmp_path)
    ds = load_dataset(tmp_path)
    frames, man = ds
    assert man == manifest and len(frames) == 9
    assert [f.t for f in ds.test] == [0, 8]
    assert manifest["water"] == {"A": [0.1, 0.55, 0.78], "beta": [3.3, 2.9, 2.5], "gamma": [2.0, 1.88, 1.8]}

    gt, cams = synth_scene(spec)
    for cam, f in zip(cams, frames):
        assert np.allclose(f.R, cam.R, atol=1e-9) and np.allclose(f.T, cam.T, atol=1e-9)
        clean = np.clip(render_gaussians(gt, gt.colors(), cam).image.data, 0, 1)
        assert np.max(np.abs(ds.clean_image(f) - clean)) <= 1 / 255 + 1e-6
        assert f.image.dtype == np.float32 and f.image.shape == (3, 24, 32)

    ck = load_checkpoint(tmp_path / "gt.ply")
    assert np.allclose(ck.mean_water(), ds.water().vector())
    assert len(ds.gt_gaussians()) == 60
    pts, cols = initial_point_cloud(tmp_path)
    assert pts.shape == (60, 3) and np.all((cols >= 0) & (cols <= 1))
    colmap_frames, _, _ = load_colmap(tmp_path / "sparse" / "0")
    assert [f.name for f in colmap_frames] == [f.name for f in frames]


def test_depth_storage_precision(tmp_path):
    spec = _small(frames=2)
    generate_dataset(spec, tmp_path)
    ds = load_dataset(tmp_path)
    gt, cams = synth_scene(spec)
    r = render_gaussians(gt, gt.colors(), cams[1])
    truth = range_map(r.depth.data, cams[1])
    ok = r.alpha.data > 0.5
    rel = np.abs(ds.depth(ds.frames[1]) - truth)[ok] / truth[ok]
    assert rel.max() <= 1e-4


def test_regeneration_is_byte_identical(tmp_path):
    spec = _small(frames=3)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_degenerate_water_and_no_caustics_is_clean(tmp_path):
    spec = _small(frames=2, caustic=None, water={"A": [0.5, 0.5, 0.5], "beta": [1e-6] * 3, "gamma": [1e-6] * 3})
    generate_dataset(spec, tmp_path)
    ds = load_dataset(tmp_path)
    for f in ds.frames:
        assert np.max(np.abs(f.image - ds.clean_image(f))) <= 1 / 255 + 1e-6


def test_water_reproduces_degraded_without_caustics(tmp_path):
    generate_dataset(_small(frames=3, caustic=None, water="S2-A-Med"), tmp_path)
    ds = load_dataset(tmp_path)
    for f in ds.frames:
        redo = np.clip(apply_water_image(ds.clean_image(f).astype(np.float64), ds.depth(f), ds.water()).data, 0, 1)
        assert np.max(np.abs(redo - f.image)) <= 2 / 255


def test_caustics_then_water_order(tmp_path):
    spec = _small(frames=2, water="S1-A-Low")
    generate_dataset(spec, tmp_path)
    ds = load_dataset(tmp_path)
    gt, cams = synth_scene(spec)
    cam = cams[1]
    r = render_gaussians(gt, gt.colors(), cam)
    clean = r.image.data.astype(np.float64)
    z = r.depth.data.astype(np.float64)
    dist = range_map(z, cam)
    cfg = spec.caustic_config()
    world = backproject(z, cam)
    A, b, g = ds.water().A, ds.water().beta, ds.water().gamma
    v, u = 12, 16
    factor = 1 + cfg.amplitude * (2 * caustic_value(cfg, world[v, u, :2], cam.t) - 1)
    assert abs(factor - 1) > 0.05
    d = dist[0, v, u]
    lit_first = np.clip(clean[:, v, u] * factor * np.exp(-b * d) + A * (1 - np.exp(-g * d)), 0, 1)
    water_first = np.clip((clean[:, v, u] * np.exp(-b * d) + A * (1 - np.exp(-g * d))) * factor, 0, 1)
    observed = ds.frames[1].image[:, v, u]
    assert np.max(np.abs(observed - lit_first)) <= 1 / 255
    assert np.max(np.abs(observed - water_first)) > 2 / 255


def test_pseudo_depth_correlates_with_depth(tmp_path):
    generate_dataset(_small(frames=2, pseudo_noise=0.0), tmp_path)
    ds = load_dataset(tmp_path)
    for f in ds.frames:
        d = ds.depth(f)[0].ravel()
        p = f.pseudo_depth[0].ravel()
        assert np.all((p >= 0) & (p <= 1))
        assert np.corrcoef(d, p)[0, 1] > 0.999


def test_split_every_eighth_frame(tmp_path):
    spec = SyntheticSceneSpec(gaussian_count=30, frames=120, width=16, height=12, caustic=None)
    generate_dataset(spec, tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds.test) == 15 and [f.t for f in ds.test] == list(range(0, 120, 8))
    assert len(ds.train) == 105


def test_missing_and_corrupt_files(tmp_path):
    generate_dataset(_small(frames=2), tmp_path)
    (tmp_path / "images_degraded" / "frame_0001.png").unlink()
    with pytest.raises(DatasetError, match="frame_0001.png"):
        load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="frame_0001.png"):
        load_dataset(tmp_path, verify=False)

    generate_dataset(_small(frames=2), tmp_path / "c")
    p = tmp_path / "c" / "images_clean" / "frame_0000.png"
    p.write_bytes(p.read_bytes()[:-10] + b"0123456789")
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path / "c")
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path / "nothing")


def test_external_pseudo_depth_import(tmp_path):
    generate_dataset(_small(frames=2), tmp_path / "ds")
    ext = tmp_path / "ext"
    ext.mkdir()
    from PIL import Image

    for k in range(2):
        Image.fromarray(np.tile(np.arange(32, dtype=np.uint8) * 8, (24, 1))).save(ext / f"frame_{k:04d}.png")
    ds = load_dataset(tmp_path / "ds", pseudo_depth_dir=ext)
    pd = ds.frames[0].pseudo_depth
    assert pd.shape == (1, 24, 32) and pd.min() == 0 and pd.max() == pytest.approx(1.0)
    assert np.all(np.diff(pd[0, 0]) > 0)
    assert read_png(ext / "frame_0000.png").shape[0] == 1
