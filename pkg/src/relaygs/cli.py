"""relaygs command line: gen, train, render, eval, export-ply, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import PipelineConfig, replace
from .scene import ConfigError, normalized_time

log = logging.getLogger("relaygs")

THREADS_ENV = "RELAYGS_THREADS"
STAGE_FILE = "stage{}.rgs"


class UserError(Exception):
    pass


def _set_threads() -> None:
    val = os.environ.get(THREADS_ENV)
    if val:
        try:
            n = int(val)
        except ValueError:
            raise UserError(f"{THREADS_ENV} must be an integer, got {val!r}") from None
        torch.set_num_threads(max(1, n))


def _load_config(path: Optional[str], preset: str, overrides: List[str], seed: Optional[int]) -> PipelineConfig:
    if path:
        cfg = PipelineConfig.loads(Path(path).read_text())
    else:
        cfg = PipelineConfig.desk() if preset == "desk" else PipelineConfig()
    kv = {}
    for item in overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = json.loads(v)
    if seed is not None:
        kv["seed"] = seed
    return replace(cfg, **kv) if kv else cfg


def _frame_range(text: Optional[str], frame_count: int) -> List[int]:
    if not text:
        return list(range(1, frame_count + 1))
    lo, _, hi = text.partition(":")
    lo_i, hi_i = int(lo), int(hi) if hi else int(lo)
    if not 1 <= lo_i <= hi_i <= frame_count:
        raise UserError(f"frame range {text!r} outside 1..{frame_count}")
    return list(range(lo_i, hi_i + 1))


# subcommands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .storage import write_dataset
    from .synth import SceneSpec, desk_scene, generate_scene, seed_points

    if args.spec:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = desk_scene(args.seed, args.motion)
    gt, frames, labels = generate_scene(spec)
    extra = {"scene": json.dumps(spec.to_dict(), sort_keys=True)}
    write_dataset(frames, args.out, labels, extra)
    pts, cols = seed_points(gt)
    np.savetxt(Path(args.out) / "points.txt", np.hstack([pts, cols]), fmt="%.17g")
    print(f"wrote {len(frames.images)} images to {args.out}")
    return 0


def _points(data: Path, cfg: PipelineConfig):
    path = data / "points.txt"
    if path.is_file():
        arr = np.loadtxt(path, ndmin=2)
        return arr[:, :3], arr[:, 3:6]
    rng = np.random.default_rng(cfg.seed)
    warnings.warn("no points.txt; initializing from random points", RuntimeWarning)
    return rng.uniform(-2.0, 2.0, (2000, 3)), rng.uniform(0.0, 1.0, (2000, 3))


def cmd_train(args) -> int:
    from .pipeline import initial_state, run_stage
    from .storage import load_checkpoint, read_dataset, save_checkpoint

    data = Path(args.data)
    frames = read_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args.config, args.preset, args.set or [], args.seed)
    if args.stage == "all":
        stages = [1, 2, 3]
    else:
        stages = [int(args.stage)]
    first = stages[0]
    if first == 1:
        state = initial_state(*_points(data, cfg), cfg, frames.frame_count, len(frames.cameras))
    else:
        prev = out / STAGE_FILE.format(first - 1)
        if not prev.is_file():
            raise UserError(f"stage {first} needs {prev}; run the earlier stage first")
        state = load_checkpoint(prev, cfg)
    torch.manual_seed(state.cfg.seed)
    if state.cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    for stage in stages:
        every = max(1, args.log_every)
        cb = lambda s, l, _st=stage: print(f"stage {_st} step {s + 1} loss {l:.6f}") if (s + 1) % every == 0 else None
        state = run_stage(state, frames, stage, callback=cb)
        save_checkpoint(state, out / STAGE_FILE.format(stage))
        if state.report:
            (out / f"stage{stage}_report.txt").write_text(state.report)
        print(f"stage {stage} done: {state.cloud.counts()}")
    return 0


def cmd_render(args) -> int:
    from .pipeline import render_state
    from .storage import load_checkpoint, read_dataset, write_png

    state = load_checkpoint(args.checkpoint)
    frames = read_dataset(args.data)
    if not 0 <= args.camera < len(frames.cameras):
        raise UserError(f"camera {args.camera} not in dataset")
    out = Path(args.out) / "frames" / str(args.camera)
    out.mkdir(parents=True, exist_ok=True)
    for f in _frame_range(args.frames, state.frame_count):
        img = render_state(state, frames.cameras[args.camera], normalized_time(f, state.frame_count),
                           cam_index=args.camera)
        write_png(img, out / f"{f:04d}.png")
    return 0


def cmd_eval(args) -> int:
    from .metrics import MetricReport
    from .pipeline import evaluate
    from .storage import load_checkpoint, read_dataset, read_png

    frames = read_dataset(args.data)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        cams = args.cameras if args.cameras is not None else list(state.cfg.test_cameras)
        report = evaluate(state, frames, cams)
    elif args.images:
        cams = args.cameras if args.cameras is not None else sorted({c for c, _ in frames.images})
        pairs = {}
        for (cam, f), gt in sorted(frames.images.items()):
            if cam not in cams:
                continue
            path = Path(args.images) / "frames" / str(cam) / f"{f:04d}.png"
            if not path.is_file():
                raise UserError(f"missing rendered image {path}")
            pairs[f"cam{cam}/frame{f}"] = (read_png(path), gt)
        report = MetricReport.from_pairs(pairs)
    else:
        raise UserError("eval needs --checkpoint or --images")
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    mean = report.mean_psnr
    print(f"mean PSNR {'+inf' if mean == float('inf') else f'{mean:.3f} dB'}, mean SSIM {report.mean_ssim:.4f}")
    return 0


def cmd_export_ply(args) -> int:
    from .storage import export_ply, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    export_ply(state.cloud, args.out, precision=args.precision)
    print(f"wrote {len(state.cloud)} Gaussians to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_seed

    worst = 0.0
    for s in range(args.seeds):
        case = check_seed(s, h=args.h, size=args.size)
        worst = max(worst, case.max_rel_error)
        print(f"seed {s}: max rel error {case.max_rel_error:.2e} " +
              " ".join(f"{k}={v:.1e}" for k, v in sorted(case.per_class.items())))
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.2e} (tolerance {args.tol:g})")
    return 0 if ok else 1


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaygs", description="Relay Gaussian reconstruction of dynamic scenes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("--spec", help="scene spec (JSON)")
    g.add_argument("--motion", default="linear", choices=["static", "linear", "circular", "hops"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory for stage checkpoints")
    t.add_argument("--stage", default="all", choices=["all", "1", "2", "3"])
    t.add_argument("--config", help="pipeline config (JSON)")
    t.add_argument("--preset", default="desk", choices=["desk", "full"])
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True, help="dataset providing the cameras")
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--frames", help="first:last (1-based, inclusive)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out cameras")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--images", help="directory with frames/<cam>/<frame>.png to score instead")
    e.add_argument("--cameras", type=int, nargs="+")
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", help="write the canonical cloud as PLY")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--precision", default="float", choices=["float", "double"])
    x.set_defaults(func=cmd_export_ply)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (UserError, ConfigError, FileNotFoundError, NotADirectoryError, KeyError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"relaygs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
