"""Command-line entry point: scene generation, sweeps, benchmarks, checks and a demo."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bench import DEFAULT_SIZES, parse_size, run_bench
from .checks import run_checks
from .geometry import CameraRig
from .model import ModelConfig, WidthFormer
from .numeric import read_tensor, write_tensor
from .scene import SceneSpec, gen_scene
from .sweep import DEFAULT_SIGMAS, run_sweep

log = logging.getLogger("widthformer")

KIND_ALIASES = {"rot": "rotation", "rotation": "rotation", "trans": "translation", "translation": "translation"}


def default_seed() -> int:
    return int(os.environ.get("BVT_SEED", "0"))


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _load_scene(args) -> tuple[CameraRig, np.ndarray]:
    if args.scene:
        rig_path, feat_path = args.scene
        rig = CameraRig.load(rig_path)
        feat = read_tensor(feat_path).astype(float)
        if feat.ndim != 4 or feat.shape[0] != len(rig):
            raise SystemExit(f"{feat_path}: expected ({len(rig)}, H, W, C) features, got {feat.shape}")
        return rig, feat
    return gen_scene(SceneSpec(seed=args.seed))


def _model_for(feat: np.ndarray, args) -> WidthFormer:
    n, h, w, c = feat.shape
    config = ModelConfig(channels=c, heads=args.heads, rows=h, bev_h=args.bev, bev_w=args.bev)
    return WidthFormer.init(config, seed=args.seed)


def cmd_gen_scene(args) -> int:
    spec = SceneSpec(args.cameras, args.h_i, args.w_i, args.channels, args.seed)
    rig, feat = gen_scene(spec)
    rig_path, feat_path = args.out
    rig.save(rig_path)
    write_tensor(feat_path, feat)
    log.info("scene with %d cameras, features %s", len(rig), feat.shape)
    return 0


def cmd_sweep(args) -> int:
    rig, feat = _load_scene(args)
    model = _model_for(feat, args)
    kinds = [KIND_ALIASES[k] for k in _csv_list(args.kinds)]
    result = run_sweep(model, rig, feat, kinds=kinds, axes=_csv_list(args.axes),
                       sigmas=[float(s) for s in _csv_list(args.sigmas)], trials=args.trials,
                       seed=args.seed, frame=args.frame, workers=args.workers)
    _write(result.to_csv(), args.out)
    return 0


def cmd_bench(args) -> int:
    sizes = [parse_size(s) for s in _csv_list(args.sizes)] if args.sizes else DEFAULT_SIZES
    result = run_bench(sizes, repeats=args.repeats, h_b=args.bev, heads=args.heads, seed=args.seed,
                       timed=not args.no_timing)
    for size, (k_w, k_f) in result.key_counts.items():
        log.info("size %s: decoder keys %d, full-feature keys %d (ratio %d)", "x".join(map(str, size)),
                 k_w, k_f, k_f // k_w)
    _write(result.to_csv(timings=not args.no_timing), args.out)
    return 0


def cmd_check(args) -> int:
    results = run_checks(args.filter)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed or not results else 0


def cmd_demo(args) -> int:
    rig, feat = gen_scene(SceneSpec(seed=args.seed))
    model = _model_for(feat, args)
    bev = model(rig, feat)
    print(f"F^B shape {bev.shape}, mean {bev.mean():.6f}, std {bev.std():.6f}")
    if args.dump_bev:
        write_tensor(args.dump_bev, bev)
        log.info("wrote %s", args.dump_bev)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widthformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bev=32):
        p.add_argument("--seed", type=int, default=default_seed(), help="default: $BVT_SEED or 0")
        p.add_argument("--heads", type=int, default=4)
        p.add_argument("--bev", type=int, default=bev, help="BEV grid side (128 matches the full-size setting)")

    p = sub.add_parser("gen-scene", help="write a synthetic rig (JSON) and features (BVT1)")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--h-i", type=int, default=16)
    p.add_argument("--w-i", type=int, default=44)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--out", nargs=2, metavar=("RIG_JSON", "FEATS_BVT"), required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("sweep", help="extrinsic-perturbation drift sweep")
    common(p)
    p.add_argument("--scene", nargs=2, metavar=("RIG_JSON", "FEATS_BVT"))
    p.add_argument("--kinds", default="rot,trans")
    p.add_argument("--axes", default="x,y,z")
    p.add_argument("--sigmas", default=",".join(str(s) for s in DEFAULT_SIGMAS))
    p.add_argument("--trials", type=int, default=16)
    p.add_argument("--frame", choices=("camera", "ego"), default="camera")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-stage MAC counts and latency")
    common(p)
    p.add_argument("--sizes", help="comma-separated HxWxC settings, e.g. 16x44x64,32x88x64")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-timing", action="store_true", help="MAC and key counts only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--filter", default="*", help="glob over check names, e.g. 'polar*'")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("demo", help="run the default pipeline once")
    common(p)
    p.add_argument("--dump-bev", metavar="OUT_BVT")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
