"""Optimization: learning-rate schedules, Adam, the three-stage protocol and the loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import LOG_FIELDS, LossLog, LossWeights, total_loss
from .numerics import Tape, backward
from .renderer import render_gaussians
from .scene import CameraFrame, GaussianPairs, SceneBounds, save_checkpoint
from .sdm import SD_GROUPS, TD_GROUPS, FrameInputs, SdmParams, degraded_colors_for_frame

log = logging.getLogger(__name__)

ABLATIONS = ("no-sd", "no-td", "no-dgg", "no-eps-reg", "no-ms")
GAUSSIAN_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")
FULL_STAGES = (10000, 10000, 10000)
# the brightness encoder warms up for this share of the run (1024 of 30000 steps)
IBF_WARMUP_FRACTION = 1024 / 30000


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Schedule:
    lr_start: float
    lr_end: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ValueError("learning rates must be positive")
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be in [0, total_steps)")


def lr_at(s: Schedule, step: int) -> float:
    """Linear warmup from 0, then exponential interpolation from lr_start to lr_end."""
    if not 0 <= step <= max(s.total_steps, 0):
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_start * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.lr_start
    frac = (step - s.warmup_steps) / span
    return float(s.lr_start * (s.lr_end / s.lr_start) ** frac)


@dataclass
class AdamState:
    """Per-parameter moments and step counts."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> AdamState:
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place.

    ``lr`` is a float or a name -> float mapping.  Parameters without a
    gradient entry are left untouched.
    """
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        state.t[name] += 1
        t = state.t[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        step_lr = lr[name] if isinstance(lr, dict) else lr
        p.data -= (step_lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return state


@dataclass
class StageConfig:
    lengths: tuple[int, int, int] = (300, 300, 300)
    joint_only: bool = False

    def __post_init__(self):
        self.lengths = tuple(int(n) for n in self.lengths)
        if len(self.lengths) != 3 or any(n < 0 for n in self.lengths):
            raise ValueError("stage lengths must be three non-negative integers")

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def stage_of(self, step: int) -> int:
        a, b, _ = self.lengths
        if self.joint_only:
            return 3
        if step < a:
            return 1
        if step < a + b:
            return 2
        return 3


def trainable_mask(cfg: StageConfig, step: int) -> dict[str, bool]:
    """Which parameter families receive updates at ``step``."""
    stage = cfg.stage_of(step)
    if stage == 1:
        return {"SD": True, "TD": False, "gaussians": True}
    if stage == 2:
        sd_turn = (step - cfg.lengths[0]) % 2 == 0
        return {"SD": sd_turn, "TD": not sd_turn, "gaussians": True}
    return {"SD": True, "TD": True, "gaussians": True}


@dataclass
class TrainConfig:
    stages: tuple[int, int, int] = (300, 300, 300)
    seed: int = 0
    ablate: tuple[str, ...] = ()
    checkpoint_interval: int = 0
    hash_log2_size: int = 15
    max_gaussians: int = 200
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    loss: dict = field(default_factory=lambda: asdict(LossWeights()))
    # (lr_start, lr_end); positions are multiplied by the scene extent
    lr: dict = field(
        default_factory=lambda: {
            "wpe": [1e-3, 1.5e-4],
            "omega": [1e-3, 1.5e-4],
            "dec": [1e-3, 1.5e-4],
            "ibf": [2e-3, 2e-4],
            "hash": [1e-2, 1e-4],
            "positions": [1.6e-4, 1.6e-6],
            "color_logits": [2.5e-3, 2.5e-3],
            "opacity_logits": [5e-2, 5e-2],
            "log_scales": [5e-3, 5e-3],
            "rotations": [1e-3, 1e-3],
        }
    )

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.ablate = tuple(self.ablate)
        self.background = tuple(float(b) for b in self.background)
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation(s) {bad}; choose from {ABLATIONS}")
        StageConfig(self.stages)
        LossWeights(**self.loss)
        for k, v in self.lr.items():
            if len(v) != 2 or not (v[0] > 0 and v[1] > 0):
                raise ValueError(f"learning rate pair for {k} must be two positive numbers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["ablate"] = list(self.ablate)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "lr" in d:
            d["lr"] = {**cls().lr, **d["lr"]}
        if "loss" in d:
            d["loss"] = {**asdict(LossWeights()), **d["loss"]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def schedules(self, extent: float = 1.0) -> dict[str, Schedule]:
        total = max(sum(self.stages), 1)
        out = {}
        for name, (a, b) in self.lr.items():
            scale = extent if name == "positions" else 1.0
            warm = int(round(IBF_WARMUP_FRACTION * total)) if name == "ibf" else 0
            out[name] = Schedule(a * scale, b * scale, total, min(warm, total - 1))
        return out


@dataclass
class TrainResult:
    pairs: GaussianPairs
    sdm: SdmParams
    water_history: dict[int, np.ndarray]
    log: list[dict]
    steps: int
    seconds: float


def _group_of(name: str) -> str:
    return name.split(".", 1)[0]


def _gnorm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def _all_finite(grads: dict) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def train(
    frames: list[CameraFrame],
    pairs: GaussianPairs,
    sdm: SdmParams,
    bounds: SceneBounds,
    config: TrainConfig | None = None,
    out_dir=None,
    inputs: dict[int, FrameInputs] | None = None,
) -> TrainResult:
    """Run the staged optimization on the training ``frames``.

    ``pairs`` and ``sdm`` are updated in place.  With ``out_dir`` set, a CSV
    log, periodic checkpoints and (on abort) a diagnostic dump are written.
    """
    config = config or TrainConfig()
    if not frames:
        raise ValueError("training needs at least one frame")
    stage_cfg = StageConfig(config.stages, joint_only="no-ms" in config.ablate)
    weights = LossWeights(**config.loss)
    if "no-dgg" in config.ablate:
        weights.cds = weights.ads = 0.0
    if "no-eps-reg" in config.ablate:
        weights.eps = 0.0
    use_sd = "no-sd" not in config.ablate
    use_td = "no-td" not in config.ablate
    schedules = config.schedules(bounds.extent)
    inputs = inputs if inputs is not None else {}
    for k, f in enumerate(frames):
        if k not in inputs:
            inputs[k] = FrameInputs.from_frame(f.image, f.pseudo_depth)

    out_dir = Path(out_dir) if out_dir is not None else None
    logger = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logger = LossLog(out_dir / "train_log.csv", extra_fields=("stage", "frame", "sd_gnorm", "td_gnorm", "gs_gnorm"))

    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    state = AdamState()
    water_history: dict[int, np.ndarray] = {}
    rows: list[dict] = []
    total = stage_cfg.total
    t0 = time.perf_counter()
    sdm_params = sdm.tensors
    gauss_params = pairs.params()
    try:
        for step in range(total):
            if not order:
                order = list(rng.permutation(len(frames)))
            k = int(order.pop(0))
            frame = frames[k]
            mask = trainable_mask(stage_cfg, step)
            with Tape() as tape:
                fc = degraded_colors_for_frame(
                    pairs,
                    frame,
                    inputs[k],
                    sdm,
                    bounds,
                    use_sd=use_sd,
                    use_td=use_td,
                    detach_sd=not mask["SD"],
                    detach_td=not mask["TD"],
                )
                out = render_gaussians(pairs, fc.colors, frame, config.background)
                loss, parts = total_loss(out.image, frame.image, out.depth, frame.pseudo_depth, fc.eps, weights)
            if not np.isfinite(parts["total"]):
                _dump(out_dir, step, frame, parts)
                raise TrainingAborted(f"non-finite loss at step {step} on frame {frame.name or k}: {parts}")
            grads = backward(tape, loss)

            sd_g = {n: grads[p] for n, p in sdm_params.items() if _group_of(n) in SD_GROUPS}
            td_g = {n: grads[p] for n, p in sdm_params.items() if _group_of(n) in TD_GROUPS}
            gs_g = {n: grads[p] for n, p in gauss_params.items()}
            for g in (sd_g, td_g, gs_g):
                if not _all_finite(g):
                    _dump(out_dir, step, frame, parts)
                    raise TrainingAborted(f"non-finite gradient at step {step} on frame {frame.name or k}")
            if not (mask["SD"] and use_sd):
                sd_g = {}
            if not (mask["TD"] and use_td):
                td_g = {}

            lrs = {n: lr_at(schedules[_group_of(n)], step) for n in sdm_params}
            lrs.update({n: lr_at(schedules[n], step) for n in gauss_params})
            adam_step(sdm_params, {**sd_g, **td_g}, state, lrs)
            adam_step(gauss_params, gs_g, state, lrs)
            pairs.normalize_rotations()

            if use_sd:
                water_history[int(frame.t)] = fc.water.vector().astype(np.float32)
            parts.update(
                step=step,
                stage=stage_cfg.stage_of(step),
                frame=int(frame.t),
                sd_gnorm=_gnorm(sd_g),
                td_gnorm=_gnorm(td_g),
                gs_gnorm=_gnorm(gs_g),
            )
            rows.append(parts)
            if logger is not None:
                logger.write(step, parts)
            if out_dir is not None and config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
                _save(out_dir / f"ckpt_{step + 1:06d}.ply", pairs, sdm, water_history, bounds, config, step + 1)
    finally:
        if logger is not None:
            logger.close()
    if out_dir is not None:
        _save(out_dir / "final.ply", pairs, sdm, water_history, bounds, config, total)
    return TrainResult(pairs, sdm, water_history, rows, total, time.perf_counter() - t0)


def _save(path, pairs, sdm, water_history, bounds, config, step) -> None:
    meta = {"step": step, "config": config.to_dict()}
    save_checkpoint(path, pairs, sdm.state_dict(), water_history, bounds, meta)


def _dump(out_dir, step, frame: CameraFrame, parts) -> None:
    log.error("training aborted at step %d (frame %s): %s", step, frame.name, parts)
    if out_dir is None:
        return
    np.savez(
        Path(out_dir) / f"abort_step{step:06d}.npz",
        image=frame.image,
        pseudo_depth=frame.pseudo_depth if frame.pseudo_depth is not None else np.zeros(0),
        R=frame.R,
        T=frame.T,
        t=frame.t,
        parts=json.dumps({k: v for k, v in parts.items()}),
    )


__all__ = [
    "ABLATIONS",
    "AdamState",
    "GAUSSIAN_GROUPS",
    "LOG_FIELDS",
    "FULL_STAGES",
    "Schedule",
    "StageConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "adam_step",
    "lr_at",
    "train",
    "trainable_mask",
]
