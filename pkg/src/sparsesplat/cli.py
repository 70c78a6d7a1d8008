"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
``SPARSESPLAT_THREADS`` overrides the number of torch threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path


EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
THREADS_ENV = "SPARSESPLAT_THREADS"

log = logging.getLogger("sparsesplat")


class LockError(RuntimeError):
    pass


@contextmanager
def directory_lock(directory):
    """Exclusive ownership of ``directory`` through an O_EXCL lockfile."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is in use by another run (remove {lock} if that run is gone)") from None
    with os.fdopen(fd, "w") as f:
        f.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _floats(text: str, n: int, name: str) -> tuple:
    from .config import ConfigError

    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--{name} expects {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"--{name} expects {n} comma-separated numbers, got {text!r}")
    return vals


def _camera(cameras, index: int):
    from .dataset import DatasetError

    by_id = {c.id: c for c in cameras}
    if index not in by_id:
        raise DatasetError(f"camera {index} not found (have {sorted(by_id)})")
    return by_id[index]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .dataset import SynthOptions, write_synthetic_dataset
    from .synthetic import SyntheticSceneSpec

    spec = SyntheticSceneSpec(rng_seed=args.seed, gaussian_count=args.gaussians, camera_count=args.cameras,
                              floater_count=args.floaters, image_size=(args.width, args.height))
    opts = SynthOptions(scene=spec, pose_noise=_floats(args.pose_noise, 2, "pose-noise"), ghost=not args.no_ghost,
                        seed=args.seed)
    with directory_lock(args.out):
        split = write_synthetic_dataset(args.out, opts)
    print(json.dumps({"dataset": str(args.out), **split.to_dict()}))
    return EXIT_OK


def cmd_render(args) -> int:
    from .fileio import save_pfm, save_png
    from .geometry import load_cameras
    from .render import render
    from .scene import load_ply

    scene = load_ply(args.scene)
    cam_path = args.cameras or Path(args.scene).with_name("cameras.json")
    cam = _camera(load_cameras(cam_path), args.camera)
    out = render(scene, cam)
    prefix = Path(args.out or f"view{args.camera}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_png(out.color, prefix.with_name(prefix.name + ".png"))
    save_pfm(out.depth, prefix.with_name(prefix.name + "_depth.pfm"))
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .fileio import load_pfm, load_png, save_pfm, save_png
    from .fusion import FusionInput, fuse_bidirectional, fuse_single
    from .geometry import load_cameras

    cams = load_cameras(args.cameras)
    t, k0, k1 = args.views
    d_t, d_prev, d_next = (load_pfm(p) for p in args.depths)
    inp = FusionInput(load_png(args.base), load_png(args.cand_prev), load_png(args.cand_next), d_t,
                      _camera(cams, t), _camera(cams, k0), _camera(cams, k1), d_prev, d_next)
    fused, (w1, w2) = (fuse_single if args.single else fuse_bidirectional)(inp, args.eps)
    save_png(fused, args.out)
    if args.weights_out:
        stem = Path(args.weights_out)
        save_pfm(w1, stem.with_name(stem.stem + "_prev.pfm"))
        save_pfm(w2, stem.with_name(stem.stem + "_next.pfm"))
    return EXIT_OK


def cmd_mask(args) -> int:
    from .confmask import infer_mask, match_patches, save_correspondences
    from .fileio import load_png, mask_to_png

    img = load_png(args.image)
    matches = [match_patches(img, load_png(r), args.stride, args.patch_radius, args.min_zncc) for r in args.refs]
    if args.matches:
        for i, m in enumerate(matches):
            save_correspondences(m, f"{args.matches}_{i}.csv")
    mask = infer_mask(matches[0], matches[1], img.shape[:2], args.support_radius)
    mask_to_png(mask, args.out)
    return EXIT_OK


def cmd_manage(args) -> int:
    from .fileio import write_json
    from .geometry import load_cameras
    from .manage import apply_drop, importance_scores
    from .scene import load_ply, save_ply

    scene = load_ply(args.scene)
    report = importance_scores(scene, load_cameras(args.cameras), tau=_floats(args.tau, 2, "tau"))
    pruned, drop_log = apply_drop(scene, report, args.r, _floats(args.weights, 3, "weights"), args.seed)
    save_ply(pruned, args.out)
    if args.report:
        write_json(args.report, {**report.to_dict(), "drop": drop_log.to_dict()})
    print(json.dumps({"kept": len(pruned), "dropped": int((~drop_log.kept).sum())}))
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .config import load_config
    from .dataset import load_dataset
    from .fileio import load_png, mask_from_png
    from .optim import (JointSchedule, LossWeights, TrainingFrame, joint_optimize, refine, stabilize_poses,
                        write_history_csv)
    from .scene import load_ply, save_ply

    ds = load_dataset(args.data)
    scene = load_ply(args.scene) if args.scene else ds.scene_init
    oc = load_config(args.config).optim if args.config else None
    frames = [TrainingFrame(ds.image(v), ds.cameras[v], ds.depth(v)) for v in ds.split.train]
    if args.fused:
        for pv in ds.split.pseudo:
            img = load_png(Path(args.fused) / f"view{pv.view}.png")
            mpath = Path(args.masks or "") / f"view{pv.view}.png"
            mask = mask_from_png(mpath) if args.masks else None
            frames.append(TrainingFrame(img, ds.cameras[pv.view], None, mask, True))
    weights = LossWeights(oc.beta, oc.lambda_s, oc.lambda_ssim) if oc else LossWeights()
    iters = (oc.stabilize_iterations, oc.joint_iterations, oc.refine_iterations) if oc else (40, 80, 30)
    stab = stabilize_poses(scene, frames, iters[0], weights=weights)
    joint = joint_optimize(scene, frames, JointSchedule(iters[1], weights=weights), stab.poses, stab.exposures)
    scene, _ = refine(joint.scene, frames, iters[2], weights.lambda_ssim, joint.poses, stab.exposures)
    save_ply(scene, args.out)
    if args.history:
        write_history_csv(joint.history, args.history)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .fileio import write_json
    from .geometry import load_cameras
    from .pipeline import evaluate
    from .scene import load_ply

    ds = load_dataset(args.data, require_depths=False)
    scene = load_ply(args.scene)
    ref = ds.cameras_gt or ds.cameras
    est = load_cameras(args.cameras) if args.cameras else None
    views = [int(v) for v in args.views.split(",")] if args.views else list(ds.split.test)
    est_poses = [est[v].pose for v in ds.split.train] if est is not None else None
    ref_poses = [ref[v].pose for v in ds.split.train]
    report = evaluate(scene, views, ref, ds.image, est_poses, ref_poses, args.alignment)
    if args.out:
        write_json(args.out, report)
    print(json.dumps({k: v for k, v in report.items() if k != "per_view"}))
    return EXIT_OK


def cmd_run(args) -> int:
    from .config import load_config
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = args.out
    with directory_lock(cfg.output_dir):
        manifest = run_pipeline(cfg)
    print(json.dumps(manifest.metrics | {"per_view": None}, default=str))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .config import load_config
    from .pipeline import run_ablation

    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = args.out
    with directory_lock(cfg.output_dir):
        run_ablation(cfg, args.rows.split(",") if args.rows else None)
    print((Path(cfg.output_dir) / "ablation.md").read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsesplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--gaussians", type=int, default=500)
    s.add_argument("--cameras", type=int, default=12)
    s.add_argument("--floaters", type=int, default=0)
    s.add_argument("--width", type=int, default=80)
    s.add_argument("--height", type=int, default=60)
    s.add_argument("--pose-noise", default="0,0", help="translation (m), rotation (deg) on training cameras")
    s.add_argument("--no-ghost", action="store_true", help="do not inject hallucinated patches into candidates")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", help="render color PNG and depth PFM for one camera")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", help="camera JSON (default: cameras.json beside the scene)")
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--out", help="output prefix (default view<N>)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fuse", help="fuse two restoration candidates of one pseudo view")
    s.add_argument("--base", required=True)
    s.add_argument("--cand-prev", required=True)
    s.add_argument("--cand-next", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--views", type=int, nargs=3, required=True, metavar=("T", "PREV", "NEXT"),
                   help="camera ids of the pseudo view and its two references")
    s.add_argument("--depths", nargs=3, required=True, metavar="PFM", help="depth maps of T, PREV and NEXT")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--single", action="store_true", help="use only the previous-view candidate")
    s.add_argument("--out", required=True)
    s.add_argument("--weights-out", help="writes <stem>_prev.pfm and <stem>_next.pfm")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("mask", help="three-level confidence mask of an image against two references")
    s.add_argument("--image", required=True)
    s.add_argument("--refs", nargs=2, required=True)
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--patch-radius", type=int, default=3)
    s.add_argument("--min-zncc", type=float, default=0.8)
    s.add_argument("--support-radius", type=float, default=8.0)
    s.add_argument("--matches", help="prefix for correspondence CSVs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("manage", help="one scoring and random pruning pass")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--r", type=float, default=0.1)
    s.add_argument("--tau", default="0.33,0.66")
    s.add_argument("--weights", default="1.5,1.0,0.5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_manage)

    s = sub.add_parser("optimize", help="stabilize, jointly optimize and refine a scene")
    s.add_argument("--data", required=True)
    s.add_argument("--scene", help="starting scene (default: the dataset's scene_init.ply)")
    s.add_argument("--config", help="pipeline config whose [optim] block is used")
    s.add_argument("--fused", help="directory of fused pseudo frames view<t>.png")
    s.add_argument("--masks", help="directory of confidence masks view<t>.png")
    s.add_argument("--history")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("eval", help="PSNR/SSIM on held-out views and ATE of estimated cameras")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--cameras", help="estimated cameras JSON")
    s.add_argument("--views", help="comma-separated views (default: the split's test views)")
    s.add_argument("--alignment", default="similarity", choices=("similarity", "rigid", "none"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="run the full pipeline from a JSON/TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("ablate", help="run the ablation rows and print a comparison table")
    s.add_argument("--config", required=True)
    s.add_argument("--rows", help="comma-separated subset of: full,w/o mask,w/o bid-fusion,w/o spgm")
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_ablate)
    return p


def _set_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if value:
        import torch

        torch.set_num_threads(max(1, int(value)))


def main(argv=None) -> int:
    from .config import ConfigError
    from .confmask import MatchingError
    from .dataset import DatasetError
    from .fileio import ImageFormatError
    from .fusion import FusionError
    from .geometry import GeometryError
    from .manage import ManageError
    from .optim import DivergenceError, OptimError
    from .pipeline import StageError
    from .scene import PlyError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        if isinstance(exc.__cause__, DivergenceError):
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DatasetError, PlyError, ImageFormatError, MatchingError, FusionError, GeometryError, ManageError,
            OptimError, LockError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
