from __future__ import annotations

import math

import numpy as np
import pytest

from uwsplat.datasets import initial_point_cloud, load_dataset
from uwsplat.losses import read_log
from uwsplat.numerics import Tensor
from uwsplat.scene import SceneBounds, init_from_points, load_checkpoint
from uwsplat.sdm import SD_GROUPS, TD_GROUPS, SdmParams
from uwsplat.training import (
    AdamState,
    Schedule,
    StageConfig,
    TrainConfig,
    TrainingAborted,
    adam_step,
    lr_at,
    train,
    trainable_mask,
)

# 10 Adam steps on x^2 from x = 1 with lr 0.1, produced by a plain-float scalar
# reimplementation of the bias-corrected update and frozen here
ADAM_TRACE = [
    0.8999999999999999,
    0.8004122276712475,
    0.7015862713876455,
    0.6039390584653842,
    0.5079636566014631,
    0.41423645278230914,
    0.3234207011993334,
    0.23626372029054385,
    0.15358455540776142,
    0.07624915059406938,
]


# ---------------------------------------------------------------------------
# schedules and Adam
# ---------------------------------------------------------------------------


def test_lr_schedule_examples():
    s = Schedule(1e-2, 1e-4, 100)
    assert lr_at(s, 0) == 1e-2
    assert lr_at(s, 100) == pytest.approx(1e-4, abs=1e-9)
    assert lr_at(s, 50) == pytest.approx(math.sqrt(1e-2 * 1e-4), rel=1e-12)
    w = Schedule(2e-3, 2e-4, 100, warmup_steps=10)
    assert lr_at(w, 0) == 0.0
    assert lr_at(w, 5) == pytest.approx(1e-3)
    assert lr_at(w, 10) == pytest.approx(2e-3)
    assert lr_at(w, 55) == pytest.approx(math.sqrt(2e-3 * 2e-4))
    with pytest.raises(ValueError):
        lr_at(s, 101)
    with pytest.raises(ValueError):
        Schedule(0.0, 1.0, 10)


def test_adam_zero_gradient_on_fresh_state():
    p = {"x": Tensor(np.array([1.0, -2.0]))}
    st = adam_step(p, {"x": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(p["x"].data, [1.0, -2.0])
    assert np.all(st.m["x"] == 0) and np.all(st.v["x"] == 0)


def test_adam_zero_gradient_decays_moments():
    p = {"x": Tensor(np.array([1.0]))}
    st = adam_step(p, {"x": np.array([1.0])}, AdamState(), 0.1)
    m, v = st.m["x"].copy(), st.v["x"].copy()
    adam_step(p, {"x": np.array([0.0])}, st, 0.1)
    assert np.allclose(st.m["x"], 0.9 * m) and np.allclose(st.v["x"], 0.999 * v)


def test_adam_first_step_is_sign():
    p = {"x": Tensor(np.array([0.0, 0.0, 0.0]))}
    adam_step(p, {"x": np.array([3.0, -0.001, 250.0])}, AdamState(), 0.01)
    assert np.allclose(p["x"].data, [-0.01, 0.01, -0.01], rtol=1e-9)


def test_adam_scalar_trace():
    p = {"x": Tensor(np.array([1.0]))}
    st = AdamState()
    trace = []
    for _ in range(10):
        adam_step(p, {"x": 2 * p["x"].data}, st, 0.1)
        trace.append(float(p["x"].data[0]))
    assert np.allclose(trace, ADAM_TRACE, rtol=1e-12)
    assert all(abs(b) < abs(a) for a, b in zip([1.0] + trace, trace))


def test_adam_skips_missing_and_checks_shapes():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    adam_step(p, {"a": np.ones(2)}, AdamState(), {"a": 0.5, "b": 0.5})
    assert np.array_equal(p["b"].data, [1.0, 1.0]) and not np.array_equal(p["a"].data, [1.0, 1.0])
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.ones(3)}, AdamState(), 0.1)


# ---------------------------------------------------------------------------
# stage protocol
# ---------------------------------------------------------------------------


def test_trainable_mask_examples():
    cfg = StageConfig((3, 4, 2))
    assert trainable_mask(cfg, 0) == {"SD": True, "TD": False, "gaussians": True}
    assert trainable_mask(cfg, 3) == {"SD": True, "TD": False, "gaussians": True}
    assert trainable_mask(cfg, 4) == {"SD": False, "TD": True, "gaussians": True}
    assert trainable_mask(cfg, 7) == {"SD": True, "TD": True, "gaussians": True}
    joint = StageConfig((3, 4, 2), joint_only=True)
    assert all(trainable_mask(joint, s) == {"SD": True, "TD": True, "gaussians": True} for s in range(9))
    for s in range(3, 7):
        m = trainable_mask(cfg, s)
        assert m["SD"] != m["TD"]


def test_config_roundtrip_and_validation(tmp_path):
    cfg = TrainConfig(stages=(1, 2, 3), ablate=("no-td",), lr={**TrainConfig().lr, "hash": [1e-3, 1e-5]})
    path = tmp_path / "c.json"
    import json

    path.write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.load(path)
    assert back == cfg
    partial = TrainConfig.from_dict({"lr": {"wpe": [2e-3, 2e-4]}})
    assert partial.lr["wpe"] == [2e-3, 2e-4] and partial.lr["dec"] == TrainConfig().lr["dec"]
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"stagez": [1, 1, 1]})
    with pytest.raises(ValueError):
        TrainConfig(ablate=("no-water",))
    with pytest.raises(ValueError):
        TrainConfig(stages=(1, 2))


def test_group_schedules_follow_closed_form():
    cfg = TrainConfig(stages=(10000, 10000, 10000))
    s = cfg.schedules(extent=2.0)
    assert s["ibf"].warmup_steps == 1024
    for name, (a, b) in (("dec", (1e-3, 1.5e-4)), ("wpe", (1e-3, 1.5e-4)), ("omega", (1e-3, 1.5e-4)), ("hash", (1e-2, 1e-4))):
        for step in (0, 777, 15000, 30000):
            assert lr_at(s[name], step) == pytest.approx(a * (b / a) ** (step / 30000), rel=1e-12)
    assert lr_at(s["ibf"], 512) == pytest.approx(1e-3)
    assert lr_at(s["ibf"], 30000) == pytest.approx(2e-4)
    assert lr_at(s["positions"], 0) == pytest.approx(1.6e-4 * 2.0)
    assert lr_at(s["positions"], 30000) == pytest.approx(1.6e-6 * 2.0)
    assert TrainConfig(stages=(300, 300, 300)).schedules()["ibf"].warmup_steps == round(1024 / 30000 * 900)


# ---------------------------------------------------------------------------
# training loop on the tiny dataset
# ---------------------------------------------------------------------------


def _setup(root, seed=0, hash_log2=10):
    ds = load_dataset(root)
    pts, cols = initial_point_cloud(root)
    pairs = init_from_points(pts, cols, 60, seed=seed)
    return ds, pairs, SdmParams.init(seed, hash_log2_size=hash_log2), SceneBounds.from_points(pts)


def test_zero_steps_returns_initialization(tiny_dataset, tmp_path):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    before = {k: v.data.copy() for k, v in pairs.params().items()}
    res = train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(0, 0, 0), hash_log2_size=10), out_dir=tmp_path)
    assert res.steps == 0
    ck = load_checkpoint(tmp_path / "final.ply")
    for k, v in before.items():
        assert np.array_equal(getattr(ck.pairs, k).data, v.astype(np.float32))


def test_stage_one_freezes_td_and_stage_two_alternates(tiny_dataset, tmp_path):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    td_before = {n: t.data.copy() for g in TD_GROUPS for n, t in sdm.group(g).items()}
    sd_before = {n: t.data.copy() for g in SD_GROUPS for n, t in sdm.group(g).items()}
    cfg = TrainConfig(stages=(4, 0, 0), hash_log2_size=10)
    train(ds.train, pairs, sdm, bounds, cfg)
    for n, v in td_before.items():
        assert np.array_equal(sdm[n].data, v), n
    assert any(not np.array_equal(sdm[n].data, v) for n, v in sd_before.items())

    res = train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(1, 6, 1), hash_log2_size=10), out_dir=tmp_path)
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["stage"] for r in rows] == [1, 2, 2, 2, 2, 2, 2, 3]
    for r in rows[1:7]:
        sd_turn = (r["step"] - 1) % 2 == 0
        assert (r["sd_gnorm"] > 0) == sd_turn
        assert (r["td_gnorm"] > 0) == (not sd_turn)
    assert rows[0]["td_gnorm"] == 0 and rows[7]["sd_gnorm"] > 0 and rows[7]["td_gnorm"] > 0
    assert len(res.log) == 8


def test_ablations_switch_branches_off(tiny_dataset, tmp_path):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    before = sdm.state_dict()
    res = train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(1, 1, 2), ablate=("no-sd", "no-td"), hash_log2_size=10), out_dir=tmp_path)
    after = sdm.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert res.water_history == {}
    rows = read_log(tmp_path / "train_log.csv")
    assert all(r["sd_gnorm"] == 0 and r["td_gnorm"] == 0 and r["eps_reg"] == 0 for r in rows)

    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    res = train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(0, 0, 3), ablate=("no-dgg", "no-eps-reg", "no-ms"), hash_log2_size=10))
    assert all(r["cds"] == 0 and r["ads"] == 0 and r["stage"] == 3 for r in res.log)


def test_training_is_deterministic(tiny_dataset, tmp_path):
    outs = []
    for k in range(2):
        ds, pairs, sdm, bounds = _setup(tiny_dataset)
        train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(2, 2, 2), hash_log2_size=10), out_dir=tmp_path / str(k))
        outs.append((tmp_path / str(k) / "final.ply").read_bytes())
    assert outs[0] == outs[1]


def test_checkpoints_and_quaternions(tiny_dataset, tmp_path):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(2, 2, 2), checkpoint_interval=3, hash_log2_size=10), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ply")) == ["ckpt_000003.ply", "ckpt_000006.ply", "final.ply"]
    ck = load_checkpoint(tmp_path / "final.ply")
    assert ck.meta["step"] == 6 and ck.meta["config"]["stages"] == [2, 2, 2]
    assert set(ck.water_history) <= {f.t for f in ds.train}
    assert np.allclose(np.linalg.norm(pairs.rotations.data, axis=1), 1, atol=1e-6)


def test_non_finite_loss_aborts_with_dump(tiny_dataset, tmp_path):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    pairs.color_logits.data[0, 0] = np.nan
    with pytest.raises(TrainingAborted, match="step 0"):
        train(ds.train, pairs, sdm, bounds, TrainConfig(stages=(2, 0, 0), hash_log2_size=10), out_dir=tmp_path)
    assert list(tmp_path.glob("abort_*.npz"))


def test_loss_decreases_in_most_windows(tiny_dataset):
    ds, pairs, sdm, bounds = _setup(tiny_dataset)
    frames = ds.train[:1]
    res = train(frames, pairs, sdm, bounds, TrainConfig(stages=(60, 60, 60), hash_log2_size=10))
    totals = np.array([r["total"] for r in res.log])
    windows = [totals[s + 49] < totals[s] for s in range(0, len(totals) - 49, 10)]
    assert np.mean(windows) >= 0.8
