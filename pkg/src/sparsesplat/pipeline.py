"""End-to-end runs: ingest, fuse, mask, stabilize, joint optimization with pruning, refinement and
evaluation, with every intermediate written to the output directory."""

from __future__ import annotations

import dataclasses
import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig
from .confmask import infer_mask, match_patches, save_correspondences
from .dataset import Dataset, DatasetError, load_dataset
from .fileio import mask_to_png, save_pfm, save_png, write_json
from .fusion import FusionInput, fuse_bidirectional, fuse_single
from .geometry import Camera, save_cameras
from .manage import ManageError
from .metrics import ate_rmse, psnr, ssim
from .optim import (
    DivergenceError,
    ExposureParams,
    JointSchedule,
    LossWeights,
    PoseDelta,
    SpgmSchedule,
    TrainingFrame,
    joint_optimize,
    posed_cameras,
    refine,
    stabilize_poses,
    write_history_csv,
)
from .render import render
from .scene import GaussianScene, save_ply

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "full": {},
    "w/o mask": {"mask": False},
    "w/o bid-fusion": {"bidirectional": False},
    "w/o spgm": {"spgm": False},
}


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``path`` the artifact involved, when known."""

    def __init__(self, stage: str, message: str, path: Optional[str] = None):
        text = f"[{stage}] {message}" + (f" ({path})" if path else "")
        super().__init__(text)
        self.stage = stage
        self.path = path


@dataclass
class RunManifest:
    config_hash: str
    versions: dict
    timings: dict
    artifacts: dict
    substitutions: list
    metrics: dict
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def metric_block(self) -> str:
        """Canonical serialization of the metrics; identical runs give identical bytes."""
        return json.dumps(self.metrics, sort_keys=True)


def _finite(x: float):
    # JSON has no infinity; identical images are recorded as the string "inf"
    return x if np.isfinite(x) else "inf"


def versions() -> dict:
    import scipy
    import torch

    return {
        "sparsesplat": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__.split("+")[0],
    }


def evaluate(scene: GaussianScene, views: Sequence[int], cameras: Sequence[Camera], images,
             estimated_poses=None, reference_poses=None, alignment: str = "similarity") -> dict:
    """Per-view PSNR/SSIM over ``views`` plus ATE of ``estimated_poses`` against ``reference_poses``."""
    rows = []
    for v in views:
        out = render(scene, cameras[v]).color
        gt = images(v)
        rows.append({"view": int(v), "psnr": _finite(psnr(out, gt)), "ssim": ssim(out, gt)})
    report: dict = {"per_view": rows}
    finite = [r["psnr"] for r in rows if r["psnr"] != "inf"]
    report["psnr"] = float(np.mean(finite)) if finite else ("inf" if rows else None)
    report["ssim"] = float(np.mean([r["ssim"] for r in rows])) if rows else None
    if estimated_poses is not None and reference_poses is not None and len(estimated_poses) >= 3:
        report["ate_rmse"] = ate_rmse(estimated_poses, reference_poses, alignment)
        report["ate_alignment"] = alignment
    return report


def mask_precision(mask: np.ndarray, stencil: np.ndarray) -> tuple[int, int]:
    """(mask-0 pixels inside the stencil, all mask-0 pixels)."""
    zero = mask == 0.0
    return int((zero & stencil).sum()), int(zero.sum())


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except (StageError, DivergenceError):
            raise
        except DatasetError as exc:
            raise StageError(name, str(exc), exc.path) from exc
        except (ValueError, ManageError, OSError) as exc:
            raise StageError(name, str(exc)) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)


def _dataset(cfg: PipelineConfig) -> Dataset:
    return load_dataset(cfg.data_dir, cfg.images_dir, cfg.depths_dir, cfg.pseudo_dir, cfg.cameras, cfg.require_depths)


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("fused", "masks", "matches"):
        (out / sub).mkdir(exist_ok=True)
    timer = _Timer()
    artifacts: dict[str, str] = {}
    substitutions: list[str] = []
    st = cfg.stages

    with timer.stage("ingest"):
        ds = _dataset(cfg)
        scene = ds.scene_init
        cams = ds.cameras
        split = ds.split
        real_images = {v: ds.image(v) for v in split.train}
        real_depths = {v: ds.depth(v) for v in split.train}

    pseudo_frames: list[TrainingFrame] = []
    precision_counts = [0, 0]
    with timer.stage("fuse"):
        fused_images = {}
        for pv in split.pseudo:
            t, (k0, k1) = pv.view, pv.refs
            base = render(scene, cams[t])
            if st.fusion:
                refs_depth = [real_depths.get(k) if real_depths.get(k) is not None else render(scene, cams[k]).depth
                              for k in (k0, k1)]
                inp = FusionInput(base.color, ds.candidate(t, k0), ds.candidate(t, k1), base.depth, cams[t],
                                  cams[k0], cams[k1], refs_depth[0], refs_depth[1])
                fuse = fuse_bidirectional if st.bidirectional else fuse_single
                fused, (w1, w2) = fuse(inp, cfg.fusion.eps)
                save_pfm(w1, out / "fused" / f"view{t}_w{k0}.pfm")
                save_pfm(w2, out / "fused" / f"view{t}_w{k1}.pfm")
            else:
                fused = base.color
            fused_images[t] = fused
            path = out / "fused" / f"view{t}.png"
            save_png(fused, path)
            artifacts[f"fused/view{t}"] = str(path)
        if not st.fusion and split.pseudo:
            substitutions.append("fusion disabled: fused frame = rendered base")
        elif not st.bidirectional and split.pseudo:
            substitutions.append("single-reference fusion: second candidate weight = 0")

    with timer.stage("mask"):
        masks = {}
        for pv in split.pseudo:
            t, (k0, k1) = pv.view, pv.refs
            fused = fused_images[t]
            if st.mask:
                mc = cfg.mask
                kw = dict(grid_stride=mc.grid_stride, patch_radius=mc.patch_radius, min_zncc=mc.min_zncc)
                m0 = match_patches(fused, real_images.get(k0, ds.image(k0)), source_id=f"view{t}", reference_id=f"view{k0}", **kw)
                m1 = match_patches(fused, real_images.get(k1, ds.image(k1)), source_id=f"view{t}", reference_id=f"view{k1}", **kw)
                save_correspondences(m0, out / "matches" / f"view{t}_to{k0}.csv")
                save_correspondences(m1, out / "matches" / f"view{t}_to{k1}.csv")
                M = infer_mask(m0, m1, fused.shape[:2], mc.support_radius)
            else:
                M = np.ones(fused.shape[:2])
            masks[t] = M
            path = out / "masks" / f"view{t}.png"
            mask_to_png(M, path)
            artifacts[f"masks/view{t}"] = str(path)
            stencil = ds.ghost_stencil(t)
            if stencil is not None:
                hit, total = mask_precision(M, stencil)
                precision_counts[0] += hit
                precision_counts[1] += total
            pseudo_frames.append(TrainingFrame(fused, cams[t], None, M, is_pseudo=True))
        if not st.mask and split.pseudo:
            substitutions.append("mask disabled: confidence mask = 1")

    frames = [TrainingFrame(real_images[v], cams[v], real_depths[v]) for v in split.train] + pseudo_frames
    frame_views = list(split.train) + [p.view for p in split.pseudo]
    oc = cfg.optim
    weights = LossWeights(oc.beta, oc.lambda_s, oc.lambda_ssim)

    with timer.stage("stabilize"):
        if st.stabilize and oc.stabilize_iterations > 0:
            stab = stabilize_poses(scene, frames, oc.stabilize_iterations, oc.pose_lr or None, weights)
            poses, exposures = stab.poses, stab.exposures
        else:
            poses = [PoseDelta() for _ in frames]
            exposures = [ExposureParams() for _ in frames]
            substitutions.append("stabilization skipped: zero pose deltas, identity exposure")

    with timer.stage("joint"):
        mg = cfg.manage
        spgm = SpgmSchedule(mg.every if st.spgm else 0, mg.r, tuple(mg.weights), tuple(mg.tau), mg.alpha, mg.beta,
                            mg.gamma, mg.bins, mg.k, cfg.seed)
        if not st.spgm:
            substitutions.append("pruning disabled: no Gaussians dropped")
        schedule = JointSchedule(oc.joint_iterations, dict(oc.lr), oc.lr_final_ratio, oc.optimize_poses, weights, spgm)
        joint = joint_optimize(scene, frames, schedule, poses, exposures)
        scene, poses = joint.scene, joint.poses
        history_path = out / "history.csv"
        write_history_csv(joint.history, history_path)
        artifacts["history"] = str(history_path)
        if joint.spgm_logs:
            path = out / "spgm_log.json"
            write_json(path, [lg.to_dict() for lg in joint.spgm_logs])
            artifacts["spgm_log"] = str(path)

    with timer.stage("refine"):
        if st.refine and oc.refine_iterations > 0:
            scene, _ = refine(scene, frames, oc.refine_iterations, oc.lambda_ssim, poses, exposures, oc.lr or None,
                              oc.lr_final_ratio)
        else:
            substitutions.append("refinement skipped")
        scene_path = out / "scene.ply"
        save_ply(scene, scene_path)
        artifacts["scene"] = str(scene_path)
        est_cams = list(cams)
        for v, cam in zip(frame_views, posed_cameras(frames, poses)):
            est_cams[v] = cam
        cam_path = out / "cameras_est.json"
        save_cameras(est_cams, cam_path)
        artifacts["cameras"] = str(cam_path)
        write_json(out / "exposures.json", {str(v): [e.a, e.b] for v, e in zip(frame_views, exposures)})

    with timer.stage("eval"):
        ref = ds.cameras_gt
        est_poses = [est_cams[v].pose for v in split.train]
        ref_poses = [ref[v].pose for v in split.train] if ref is not None else None
        eval_cams = ref if ref is not None else cams
        metrics = evaluate(scene, split.test, eval_cams, ds.image, est_poses, ref_poses, cfg.eval.alignment)
        metrics["gaussians"] = len(scene)
        metrics["dropped"] = int(sum((~lg.kept).sum() for lg in joint.spgm_logs))
        if precision_counts[1] > 0:
            metrics["mask_zero_precision"] = precision_counts[0] / precision_counts[1]
        metrics["final_loss"] = joint.history[-1].total if joint.history else None
        eval_path = out / "eval.json"
        write_json(eval_path, metrics)
        artifacts["eval"] = str(eval_path)

    manifest = RunManifest(cfg.hash(), versions(), timer.timings, artifacts, substitutions, metrics, cfg.seed)
    write_json(out / "manifest.json", manifest.to_dict())
    write_json(out / "config.json", cfg.to_dict())
    return manifest


def run_ablation(cfg: PipelineConfig, rows: Optional[Sequence[str]] = None) -> list[dict]:
    """Run the ablation rows into ``output_dir/<row>`` and write a comparison table."""
    rows = list(rows or ABLATION_ROWS)
    base_out = Path(cfg.output_dir)
    table = []
    for name in rows:
        if name not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {name!r}; choose from {list(ABLATION_ROWS)}")
        toggles = dataclasses.replace(cfg.stages, **ABLATION_ROWS[name])
        slug = name.replace("/", "").replace(" ", "_")
        row_cfg = dataclasses.replace(cfg, stages=toggles, output_dir=str(base_out / slug))
        m = run_pipeline(row_cfg).metrics
        table.append({"row": name, "psnr": m.get("psnr"), "ssim": m.get("ssim"), "ate_rmse": m.get("ate_rmse"),
                      "gaussians": m.get("gaussians")})
    write_json(base_out / "ablation.json", table)
    lines = ["| row | PSNR | SSIM | ATE RMSE | Gaussians |", "|---|---|---|---|---|"]
    for r in table:
        fmt = lambda x, p: "-" if x is None else (x if isinstance(x, str) else f"{x:.{p}f}")  # noqa: E731
        lines.append(f"| {r['row']} | {fmt(r['psnr'], 2)} | {fmt(r['ssim'], 4)} | {fmt(r['ate_rmse'], 4)} | {r['gaussians']} |")
    (base_out / "ablation.md").write_text("\n".join(lines) + "\n")
    return table
