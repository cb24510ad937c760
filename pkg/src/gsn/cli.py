"""Command-line entry point: ``gsn <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GSNError, InvalidArgumentError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo_config(command: str, cfg: dict) -> None:
    print(f"# effective config ({command})")
    print(json.dumps(cfg, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import build_dataset

    _echo_config("gen-data", {"out": args.out, "objects": args.objects, "views": args.views, "res": args.res,
                              "seed": args.seed, "radius": args.radius})
    build_dataset(args.out, args.objects, args.views, args.res, args.seed, radius=args.radius)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, load_train_config, train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.data:
        over["dataset"] = args.data
    if args.out:
        over["out_dir"] = args.out
    if args.steps is not None:
        over["steps"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads:
        over["threads"] = args.threads
    cfg = replace(cfg, **over)
    if args.no_ecd:
        cfg = replace(cfg, equivariance="off", loss=replace(cfg.loss, rot=0.0))
    if not cfg.dataset:
        raise UsageError("train: a dataset is required (--data or 'dataset' in the config)")
    if args.resume:
        # an explicit checkpoint path picks the run directory it lives in
        ck = Path(args.resume)
        if ck.is_file() and ck.parent.resolve() != Path(cfg.out_dir).resolve():
            cfg = replace(cfg, out_dir=str(ck.parent))
    _echo_config("train", cfg.to_dict())

    def progress(step, res):
        if step == 1 or step % args.log_every == 0 or step == cfg.steps:
            print(f"step {step:6d}  total {res.total:.6f}  l2 {res.l2:.6f}  dssim {res.dssim:.6f}  "
                  f"l_rot {res.l_rot:.6f}", flush=True)

    result = train(cfg, resume=bool(args.resume), progress=progress)
    print(f"checkpoint: {result.checkpoint}")
    if result.final_eval:
        print("final eval: " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(result.final_eval.items())))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import evaluate, parse_metric_names
    from .model import load_checkpoint

    try:
        names = parse_metric_names(args.metrics)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    views = [int(v) for v in args.views.split(",")] if args.views else None
    _echo_config("eval", {"checkpoint": args.checkpoint, "data": args.data, "metrics": list(names),
                          "views": views, "out": args.out})
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    res = ds.objects[0].cameras[0]
    if args.n is not None and args.n != model.n_gaussians:
        raise ConfigError(f"checkpoint has N={model.n_gaussians} Gaussians but N={args.n} was requested")
    report = evaluate(model, ds, names, views)
    if args.out:
        report.write_csv(args.out)
    print(f"evaluated {len(ds)} objects at {res.width}x{res.height}")
    print(report.summary())
    return EXIT_OK


def cmd_render(args) -> int:
    from .data import DEFAULT_RADIUS, load_image, sample_cameras, save_image
    from .model import load_checkpoint
    from .render import render

    _echo_config("render", {"checkpoint": args.checkpoint, "image": args.image, "orbit": args.orbit,
                            "out": args.out, "res": args.res, "radius": args.radius,
                            "elevation_deg": args.elevation})
    model = load_checkpoint(args.checkpoint)
    img = load_image(args.image)
    S = model.forward(img)
    res = args.res or img.shape[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = sample_cameras(args.orbit, args.radius or DEFAULT_RADIUS, mode="ring", resolution=res,
                          elevation=math.radians(args.elevation))
    for j, cam in enumerate(cams):
        save_image(out / f"view_{j:03d}.png", render(S, cam, (1.0, 1.0, 1.0)))
    print(f"wrote {len(cams)} views to {out}")
    return EXIT_OK


def _parse_camera(spec: str, res: int):
    from .data import camera_at

    try:
        az, el, r = (float(x) for x in spec.split(","))
    except ValueError as exc:
        raise UsageError(f"--camera expects 'az,el,r' in degrees and scene units, got {spec!r}") from exc
    return camera_at(math.radians(az), math.radians(el), r, res)


def cmd_render_splat(args) -> int:
    from .data import save_image
    from .render import render
    from .splat import Camera, splat_read

    _echo_config("render-splat", {"splat": args.splat, "camera": args.camera, "camera_json": args.camera_json,
                                  "res": args.res, "out": args.out, "bg": args.bg})
    S = splat_read(args.splat)
    if args.camera_json:
        cam = Camera.from_dict(json.loads(Path(args.camera_json).read_text(encoding="utf-8")))
    else:
        cam = _parse_camera(args.camera, args.res)
    bg = tuple(float(x) for x in args.bg.split(","))
    if len(bg) != 3:
        raise UsageError("--bg expects 'r,g,b'")
    save_image(args.out, render(S, cam, bg))
    print(args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import bench_fps, loglog_slope, n_sweep
    from .model import GSNModel, ModelConfig, load_checkpoint

    _echo_config("bench", {"checkpoint": args.checkpoint, "iters": args.iters, "n_sweep": args.n_sweep,
                           "res": args.res, "hidden": args.hidden, "lattice_n": args.lattice_n})
    model = load_checkpoint(args.checkpoint) if args.checkpoint else GSNModel(
        ModelConfig(lattice_n=args.lattice_n, hidden=args.hidden))
    image = np.random.default_rng(0).uniform(0, 1, (args.res, args.res, 3))
    for line in bench_fps(model, image, args.iters).lines():
        print(line)
    if args.n_sweep:
        pts = n_sweep(hidden=model.cfg.hidden, iters=args.iters)
        print("n,decoder_ms")
        for n, ms in pts:
            print(f"{n},{ms:.4f}")
        slope = loglog_slope(pts)
        print(f"# log-log slope {slope:.3f} (linear = 1.0)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import MODULES, run_module

    mods = MODULES if args.module == "all" else (args.module,)
    _echo_config("gradcheck", {"module": args.module, "seed": args.seed, "h": 1e-5, "tol": 1e-3})
    ok = True
    for m in mods:
        for name, rep in run_module(m, args.seed).items():
            print(f"[{name}] {'PASS' if rep.passed else 'FAIL'} max rel err {rep.max_rel_err:.3e}")
            print(rep.summary())
            ok &= rep.passed
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    env_threads = os.environ.get("GSN_THREADS")
    p = _Parser(prog="gsn", description="Gaussian splat sculpting network tools")
    p.add_argument("--threads", type=int, default=int(env_threads) if env_threads else 0,
                   help="cap worker threads (default: $GSN_THREADS or library default)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="build a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--radius", type=float, default=1.3)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train or resume a model")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-ecd", action="store_true", help="drop the rotation-equivariance term")
    t.add_argument("--resume", metavar="CKPT", help="checkpoint file or run directory to continue from")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="psnr,ssim,ecd")
    e.add_argument("--views", help="comma-separated view indices (default: all but the input view)")
    e.add_argument("--n", type=int, help="expected Gaussian count; mismatch is an error")
    e.add_argument("--out", help="CSV path")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="render an orbit of F(image)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--orbit", type=int, default=8)
    r.add_argument("--out", required=True)
    r.add_argument("--res", type=int, default=0)
    r.add_argument("--radius", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=20.0, help="degrees")
    r.set_defaults(fn=cmd_render)

    rs = sub.add_parser("render-splat", help="rasterize a stored splat file")
    rs.add_argument("--splat", required=True)
    cam = rs.add_mutually_exclusive_group(required=True)
    cam.add_argument("--camera", help="'azimuth_deg,elevation_deg,radius'")
    cam.add_argument("--camera-json", help="file holding one manifest camera record")
    rs.add_argument("--res", type=int, default=128)
    rs.add_argument("--bg", default="1,1,1")
    rs.add_argument("--out", required=True)
    rs.set_defaults(fn=cmd_render_splat)

    b = sub.add_parser("bench", help="forward and render throughput")
    b.add_argument("--checkpoint")
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--n-sweep", action="store_true")
    b.add_argument("--res", type=int, default=128)
    b.add_argument("--hidden", type=int, default=512)
    b.add_argument("--lattice-n", type=int, default=16)
    b.set_defaults(fn=cmd_bench)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites (float64)")
    gc.add_argument("--module", choices=("renderer", "losses", "model", "all"), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads:
            from ._accel import set_threads

            set_threads(args.threads)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GSNError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
