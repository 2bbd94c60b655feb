"""Command-line interface: ``uwsplat {synth,train,render,eval}``.

Exit codes: 0 ok, 2 usage or invalid configuration, 3 I/O failure,
4 numeric failure.  Heavy modules are imported only after the thread
count has been pinned in the environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "UWSPLAT_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise CliError(EXIT_USAGE, "--threads must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _preset_path(name: str) -> Path:
    return Path(__file__).parent / "presets" / name


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        bundled = _preset_path(p.name if p.suffix else p.name + ".json")
        if bundled.is_file():
            p = bundled
        else:
            raise CliError(EXIT_IO, f"{what} not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{what} {p} is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {p}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .datasets import SyntheticSceneSpec, generate_dataset

    raw = _read_json(args.spec, "scene spec")
    if args.frames is not None:
        raw["frames"] = args.frames
    if args.size is not None:
        try:
            w, h = (int(v) for v in args.size.lower().split("x"))
        except ValueError:
            raise CliError(EXIT_USAGE, f"--size must look like WxH, got {args.size!r}") from None
        raw["width"], raw["height"] = w, h
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSceneSpec.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError(EXIT_USAGE, f"invalid scene spec: {exc}") from exc
    out = Path(args.out)
    try:
        manifest = generate_dataset(spec, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {out}: {exc}") from exc
    _write_json(out / "spec.json", spec.to_dict())
    n_test = sum(r["split"] == "test" for r in manifest["frames"])
    w = manifest["water"]
    print(f"wrote {len(manifest['frames'])} frames ({n_test} test) to {out}")
    print(f"water A={w['A']} beta={w['beta']} gamma={w['gamma']}")
    print(f"caustic {manifest['caustic']['pattern_id'] if manifest['caustic'] else 'none'}")
    return EXIT_OK


def _parse_steps(text: str) -> tuple[int, int, int]:
    try:
        steps = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_USAGE, f"--steps must be three integers a,b,c, got {text!r}") from None
    if len(steps) != 3 or min(steps) < 0:
        raise CliError(EXIT_USAGE, f"--steps must be three non-negative integers, got {text!r}")
    return steps


def _load_data(path):
    from .datasets import DatasetError, load_dataset

    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from exc


def cmd_train(args) -> int:
    from .datasets import initial_point_cloud
    from .scene import SceneBounds, init_from_points, save_checkpoint
    from .sdm import SdmParams
    from .training import FULL_STAGES, TrainConfig, TrainingAborted, train

    # without --config, desk-scale runs use the bundled preset and --full-schedule the library defaults
    if args.config:
        raw = _read_json(args.config, "training config")
    else:
        raw = {} if args.full_schedule else _read_json("train-desk", "training config")
    if args.full_schedule:
        raw["stages"] = list(FULL_STAGES)
    if args.steps is not None:
        raw["stages"] = list(_parse_steps(args.steps))
    if args.ablate:
        raw["ablate"] = sorted({a for item in args.ablate for a in item.split(",") if a})
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid training config: {exc}") from exc

    ds = _load_data(args.data)
    if not ds.train:
        raise CliError(EXIT_USAGE, f"dataset {args.data} has no training frames")
    try:
        pts, cols = initial_point_cloud(args.data)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read the sparse model of {args.data}: {exc}") from exc
    pairs = init_from_points(pts, cols, cfg.max_gaussians, seed=cfg.seed)
    bounds = SceneBounds.from_points(pts)
    sdm = SdmParams.init(cfg.seed, cfg.hash_log2_size)

    out = Path(args.out)
    _write_json(out / "config.json", cfg.to_dict())
    save_checkpoint(out / "init.ply", pairs, sdm.state_dict(), None, bounds, {"step": 0, "config": cfg.to_dict()})
    try:
        res = train(ds.train, pairs, sdm, bounds, cfg, out_dir=out)
    except TrainingAborted as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"I/O failure during training: {exc}") from exc
    last = res.log[-1]["total"] if res.log else float("nan")
    print(f"trained {res.steps} steps in {res.seconds:.1f}s; final loss {last:.6g}; checkpoint {out / 'final.ply'}")
    return EXIT_OK


def _load_water(path):
    from .degradation import WaterParams

    d = _read_json(path, "water file")
    if "water" in d and isinstance(d["water"], dict):
        d = d["water"]
    try:
        w = WaterParams.from_vector(list(d["A"]) + list(d["beta"]) + list(d["gamma"]))
        w.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid water file {path}: {exc}") from exc
    return w


def _load_ckpt(path):
    from .scene import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc


def _load_cameras(src):
    from .scene import ColmapParseError, load_colmap

    p = Path(src)
    if (p / "manifest.json").is_file():
        return _load_data(p).frames
    for cand in (p, p / "sparse" / "0"):
        if (cand / "cameras.txt").is_file():
            try:
                return load_colmap(cand)[0]
            except ColmapParseError as exc:
                raise CliError(EXIT_IO, str(exc)) from exc
    raise CliError(EXIT_IO, f"no cameras found at {src} (expected a dataset or a COLMAP text model)")


def cmd_render(args) -> int:
    from .datasets import write_png_rgb
    from .degradation import WaterParams
    from .metrics import render_view

    ckpt = _load_ckpt(args.ckpt)
    water = None
    if args.mode == "underwater":
        if args.water:
            water = _load_water(args.water)
        elif ckpt.mean_water() is not None:
            water = WaterParams.from_vector(ckpt.mean_water())
        else:
            raise CliError(EXIT_USAGE, "underwater mode needs --water or a checkpoint with recorded water parameters")
    cams = _load_cameras(args.cameras)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for cam in cams:
            img = render_view(ckpt.pairs, cam, args.mode, water)
            write_png_rgb(out / (Path(cam.name or f"frame_{cam.t:04d}").stem + ".png"), img)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write renders to {out}: {exc}") from exc
    resolved = {"ckpt": str(args.ckpt), "cameras": str(args.cameras), "mode": args.mode}
    if water is not None:
        v = water.vector()
        resolved["water"] = {"A": v[0:3].tolist(), "beta": v[3:6].tolist(), "gamma": v[6:9].tolist()}
    _write_json(out / "render_config.json", resolved)
    print(f"rendered {len(cams)} views ({args.mode}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .degradation import WaterParams
    from .metrics import evaluate

    ckpt = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    if not ds.test:
        raise CliError(EXIT_USAGE, f"dataset {args.data} has no test split")
    water = None
    if args.mode == "degraded_with_water":
        water = WaterParams.from_vector(ckpt.mean_water()) if ckpt.mean_water() is not None else ds.water()
    try:
        report = evaluate(
            ckpt.pairs, ds, args.mode, water, args.reference, args.panels, meta={"checkpoint": str(args.ckpt), "step": ckpt.meta.get("step")}
        )
    except FloatingPointError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    if not all(np.isfinite(v) for v in report.mean.values()):
        raise CliError(EXIT_NUMERIC, f"non-finite aggregate metric: {report.mean}")
    try:
        report.write(args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report {args.out}: {exc}") from exc
    print(json.dumps(report.mean, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwsplat", description="Underwater Gaussian splatting with degradation modelling.")
    p.add_argument("--threads", type=int, default=None, help=f"numeric threads (default: ${THREADS_ENV} or library default)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic underwater dataset")
    s.add_argument("--spec", required=True, help="scene spec JSON (or a bundled preset name such as s1-a-med)")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", help="image size WxH")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize Gaussians and the degradation networks")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="training config JSON (default: the bundled train-desk preset)")
    t.add_argument("--steps", help="stage lengths a,b,c")
    t.add_argument("--full-schedule", action="store_true", help="use 10000 steps per stage")
    t.add_argument("--ablate", action="append", help="no-sd, no-td, no-dgg, no-eps-reg or no-ms; repeatable or comma separated")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--cameras", required=True, help="dataset directory or COLMAP text model")
    r.add_argument("--mode", choices=("intrinsic", "underwater"), default="intrinsic")
    r.add_argument("--water", help="JSON with A, beta, gamma (a dataset manifest also works)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score test views of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--mode", choices=("intrinsic", "degraded_with_water"), default="intrinsic")
    e.add_argument("--reference", choices=("clean", "degraded"))
    e.add_argument("--panels", help="directory for side-by-side PNG panels")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        _set_threads(args.threads)
        if getattr(args, "ablate", None):
            from .training import ABLATIONS

            bad = [a for item in args.ablate for a in item.split(",") if a and a not in ABLATIONS]
            if bad:
                raise CliError(EXIT_USAGE, f"unknown ablation(s) {bad}; choose from {list(ABLATIONS)}")
        return args.func(args)
    except CliError as exc:
        print(f"uwsplat: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
