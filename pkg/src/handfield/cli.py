"""Command-line entry point: ``handfield <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (one-line cause on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .camera import Camera, ConfigError
from .hand_model import HandParams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VARIANT_NAMES = {"uvh": "uvh", "xyz": "xyz", "per-bone": "per_bone"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# input files


def _read_json(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_params(path) -> HandParams:
    d = _read_json(path, "hand parameter")
    if isinstance(d, dict) and "params" in d:
        d = d["params"]
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object with theta/beta/t/R")
    return HandParams.from_dict(d)


def load_pose_sequence(path) -> tuple[np.ndarray, list]:
    """``{"poses": [{"time": t, "params": {...}}, ...]}`` -> (times, params), sorted by time."""
    d = _read_json(path, "pose sequence")
    recs = d.get("poses") if isinstance(d, dict) else d
    if not isinstance(recs, list) or not recs:
        raise ConfigError(f"{path}: expected a non-empty list of pose records")
    times, params = [], []
    for k, r in enumerate(recs):
        if not isinstance(r, dict) or "params" not in r:
            raise ConfigError(f"{path}: record {k} has no params")
        times.append(float(r.get("time", k)))
        params.append(HandParams.from_dict(r["params"]))
    times = np.asarray(times)
    if np.any(np.diff(times) <= 0):
        raise ConfigError(f"{path}: timestamps must be strictly increasing")
    return times, params


def interpolate_poses(times: np.ndarray, params: list, query) -> list:
    """Linear interpolation of the parameter vectors; queries outside the range clamp to the ends."""
    vecs = np.stack([p.to_vector() for p in params])
    q = np.asarray(query, dtype=np.float64)
    out = []
    for t in q:
        v = np.array([np.interp(t, times, vecs[:, i]) for i in range(vecs.shape[1])])
        out.append(HandParams.from_vector(v))
    return out


def _cameras_of(ckpt: Path) -> list:
    p = ckpt / "cameras.json"
    if not p.is_file():
        return []
    return [Camera.from_dict(c) for c in _read_json(p, "camera")["cameras"]]


def resolve_camera(spec: str, ckpt: Path) -> tuple[Camera, int | None]:
    """A camera id of the training rig (calibrated to that camera) or a camera JSON file."""
    if spec.isdigit():
        cams = _cameras_of(ckpt)
        j = int(spec)
        if not 0 <= j < len(cams):
            raise ConfigError(f"camera id {j} not in the checkpoint's rig of {len(cams)} cameras")
        return cams[j], j
    d = _read_json(spec, "camera")
    if isinstance(d, dict) and "cameras" in d:
        d = d["cameras"][0]
    return Camera.from_dict(d), None


def _threads(args) -> int:
    from .render import default_threads

    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        n = args.threads
    else:
        try:
            n = default_threads()
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _load_avatar(ckpt: str, threads: int):
    from .training import Avatar

    d = Path(ckpt)
    if not (d / "model.hfld").is_file():
        raise FileNotFoundError(f"no checkpoint (model.hfld) in {d}")
    av, step = Avatar.load(d)
    av.threads = threads
    av.store = av.store.astype(np.float32)
    av.field.store = av.store
    if av.sr is not None:
        av.sr.store = av.store
    return av, step


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .dataset import save_dataset
    from .synth import SceneRecipe, generate_dataset

    _threads(args)
    recipe = SceneRecipe.from_dict(_read_json(args.recipe, "recipe"))
    ds = generate_dataset(recipe)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames x {len(ds.cameras)} cameras to {args.out}")
    return EXIT_OK


def _experiment_config(spec: str):
    from .config import ExperimentConfig, desk_config

    if spec == "desk":
        return desk_config()
    if spec == "default":
        return ExperimentConfig()
    return ExperimentConfig.load(spec) if Path(spec).is_file() else _read_json(spec, "config")


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .training import train

    _threads(args)
    cfg = _experiment_config(args.config)
    sections = {}
    if args.seed is not None:
        sections["seed"] = args.seed
    if args.steps is not None:
        sections["steps"] = args.steps
    if sections:
        cfg = cfg.with_(train=sections)
    ds = load_dataset(args.data)

    def log(rec):
        if not args.quiet:
            print(json.dumps(rec), flush=True)

    train(ds, cfg, args.out, resume=not args.no_resume, log=log)
    print(f"checkpoint in {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import save_png

    n = _threads(args)
    av, _ = _load_avatar(args.ckpt, n)
    params = load_params(args.params)
    cam, j = resolve_camera(args.camera, Path(args.ckpt))
    img = av.predict(params, cam, j, args.sampling, use_sr=False if args.no_sr else None)
    save_png(args.out, img)
    return EXIT_OK


def cmd_reenact(args) -> int:
    from .render import save_png

    n = _threads(args)
    if args.fps is not None and args.fps <= 0:
        raise UsageError("--fps must be positive")
    av, _ = _load_avatar(args.ckpt, n)
    times, params = load_pose_sequence(args.pose_seq)
    cam, j = resolve_camera(args.camera, Path(args.ckpt))
    if args.fps is None:
        poses = params
    else:
        count = int(np.floor((times[-1] - times[0]) * args.fps + 1e-9)) + 1
        poses = interpolate_poses(times, params, times[0] + np.arange(count) / args.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(poses):
        save_png(out / f"frame_{k:04d}.png", av.predict(p, cam, j))
    print(f"wrote {len(poses)} frames to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import bench_render
    from .synth import SceneRecipe, sample_poses

    n = _threads(args)
    av, _ = _load_avatar(args.ckpt, n)
    want = VARIANT_NAMES[args.variant]
    if av.cfg.field.variant != want:
        raise ConfigError(f"checkpoint holds a {av.cfg.field.variant!r} field, not {want!r}")
    if not args.no_sr and av.sr is None:
        raise ConfigError("checkpoint was trained without SR; pass --no-sr")
    cam = resolve_camera(args.camera or "0", Path(args.ckpt))[0]
    poses = sample_poses(SceneRecipe(seed=101, n_train=args.frames, n_heldout=0))
    rep = bench_render(av, poses, cam, n_frames=args.frames, strategy=args.sampling, use_sr=not args.no_sr,
                       threads=n, variant=f"{args.variant}/{args.sampling}/{'direct' if args.no_sr else 'sr'}")
    print(json.dumps(rep.to_dict(), indent=1))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import RUNS, run_ablation
    from .config import desk_config
    from .dataset import load_dataset

    n = _threads(args)
    names = {r.name for r in RUNS}
    if args.only:
        bad = set(args.only) - names
        if bad:
            raise UsageError(f"unknown runs {sorted(bad)}; choose from {sorted(names)}")
    base = desk_config() if args.config is None else _experiment_config(args.config)
    if args.steps is not None:
        base = base.with_(train={"steps": args.steps})
    ds = load_dataset(args.data)
    out = Path(args.out)
    work = Path(args.work) if args.work else out.parent / (out.stem + "_runs")
    report = run_ablation(ds, work, base, only=args.only, bench_frames=args.bench_frames, threads=n,
                          log=lambda m: print(m, flush=True))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handfield", description="Mesh-guided neural hand avatar: data, training, rendering.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(fn=fn)
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $HANDFIELD_THREADS or 1)")
        return s

    s = add("gen-data", cmd_gen_data, "generate the synthetic multi-view dataset")
    s.add_argument("--recipe", required=True, help="scene recipe JSON (missing keys take defaults)")
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, "train an avatar (resumes from --out)")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True, help="experiment config JSON, or the preset 'desk' / 'default'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--no-resume", action="store_true")
    s.add_argument("--quiet", action="store_true")

    s = add("render", cmd_render, "render one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--params", required=True, help="hand parameter JSON")
    s.add_argument("--camera", required=True, help="rig camera id or camera JSON file")
    s.add_argument("--out", required=True, help="output PNG")
    s.add_argument("--sampling", choices=("mesh", "hier", "strat"))
    s.add_argument("--no-sr", action="store_true")

    s = add("reenact", cmd_reenact, "render a pose sequence as numbered frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pose-seq", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fps", type=float, help="resample the sequence at this rate (default: one frame per record)")

    s = add("bench", cmd_bench, "rendering speed benchmark")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--variant", required=True, choices=tuple(VARIANT_NAMES))
    s.add_argument("--sampling", required=True, choices=("mesh", "hier", "strat"))
    s.add_argument("--no-sr", action="store_true")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--camera", help="rig camera id or camera JSON file (default: rig camera 0)")

    s = add("ablate", cmd_ablate, "run the ablation grid and write a JSON report")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--work", help="directory for per-run checkpoints (default: next to the report)")
    s.add_argument("--config", help="base experiment config (default: desk preset)")
    s.add_argument("--steps", type=int)
    s.add_argument("--only", nargs="+", help="subset of runs")
    s.add_argument("--bench-frames", type=int, default=10)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return args.fn(args)
    except UsageError as exc:
        print(f"handfield: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("handfield: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # every other failure is reported on one line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"handfield: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
