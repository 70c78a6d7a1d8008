"""On-disk dataset layout shared by ``synth`` and the pipeline.

::

    scene_gt.ply          ground-truth Gaussians (surface only)
    scene_init.ply        starting point for optimization (perturbed surface + floaters)
    cameras.json          poses the pipeline starts from (possibly perturbed)
    cameras_gt.json       reference poses for evaluation
    split.json            {"train": [...], "pseudo": [{"view": t, "refs": [k0, k1]}], "test": [...]}
    images/view{i}.png    ground-truth color for every view
    depths/view{i}.pfm    depth for the training views
    pseudo/view{t}_from{k}.png    restoration candidates, one per reference
    pseudo/view{t}_ghost.png      stencil of injected hallucinations (when any)
    meta.json             generator parameters
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fileio import load_pfm, load_png, read_json, save_pfm, save_png, write_json
from .fusion import warp_from_reference
from .geometry import Camera, RigidPose, load_cameras, save_cameras, so3_exp
from .render import render
from .scene import GaussianScene, load_ply, save_ply
from .synthetic import SyntheticSceneSpec, corrupt_frame, corruption_stencil, generate_synthetic


class DatasetError(ValueError):
    """A dataset file is missing or malformed; ``path`` names it."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = None if path is None else str(path)


@dataclass(frozen=True)
class PseudoView:
    view: int
    refs: tuple[int, int]


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    pseudo: tuple[PseudoView, ...]
    test: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "pseudo": [{"view": p.view, "refs": list(p.refs)} for p in self.pseudo],
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        try:
            pseudo = tuple(PseudoView(int(p["view"]), (int(p["refs"][0]), int(p["refs"][1]))) for p in d.get("pseudo", []))
            return cls(tuple(int(v) for v in d["train"]), pseudo, tuple(int(v) for v in d.get("test", [])))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed split: {exc}") from exc


def default_split(n_views: int) -> Split:
    """Every fourth view (plus the last) is real, the midpoints between real views are pseudo,
    the rest are held out for testing."""
    if n_views < 3:
        raise DatasetError(f"need at least 3 views for a split, got {n_views}")
    train = sorted(set(range(0, n_views, 4)) | {n_views - 1})
    pseudo = []
    for k0, k1 in zip(train[:-1], train[1:]):
        if k1 - k0 >= 2:
            pseudo.append(PseudoView((k0 + k1) // 2, (k0, k1)))
    used = set(train) | {p.view for p in pseudo}
    test = [v for v in range(n_views) if v not in used]
    return Split(tuple(train), tuple(pseudo), tuple(test))


@dataclass(frozen=True)
class SynthOptions:
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    pose_noise: tuple[float, float] = (0.0, 0.0)  # translation (m), rotation (deg) on training cameras
    init_color_noise: float = 0.15
    init_position_noise: float = 0.02
    ghost: bool = True
    ghost_patch_size: float = 0.35
    ghost_alpha: float = 0.6
    ghost_margin: int = 8
    seed: int = 0  # pose noise, initialization noise and ghost placement


def image_path(root, view: int) -> Path:
    return Path(root) / "images" / f"view{view}.png"


def depth_path(root, view: int) -> Path:
    return Path(root) / "depths" / f"view{view}.pfm"


def candidate_path(root, view: int, ref: int) -> Path:
    return Path(root) / "pseudo" / f"view{view}_from{ref}.png"


def ghost_path(root, view: int) -> Path:
    return Path(root) / "pseudo" / f"view{view}_ghost.png"


def perturb_pose(pose: RigidPose, rng, translation: float, rotation_deg: float) -> RigidPose:
    """Left-multiplied random rotation of exactly ``rotation_deg`` plus a translation of norm ``translation``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= translation / np.linalg.norm(shift)
    dR = so3_exp(axis * np.deg2rad(rotation_deg))
    return RigidPose.from_matrix(dR @ pose.R, dR @ pose.translation + shift)


def initial_scene(gt: GaussianScene, floaters: GaussianScene, rng, color_noise: float, position_noise: float) -> GaussianScene:
    init = gt.copy()
    init.colors = np.clip(init.colors + rng.uniform(-color_noise, color_noise, init.colors.shape), 0.0, 1.0)
    init.centers = init.centers + rng.normal(scale=position_noise, size=init.centers.shape)
    return init.concat(floaters)


def write_synthetic_dataset(root, options: SynthOptions = SynthOptions(), split: Optional[Split] = None) -> Split:
    """Generate a scene and write the full dataset layout under ``root``."""
    root = Path(root)
    for sub in ("images", "depths", "pseudo"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    synth = generate_synthetic(options.scene)
    cams_gt = synth.cameras
    split = split or default_split(len(cams_gt))
    rng = np.random.default_rng(options.seed)

    gt = synth.surface_scene
    floaters = synth.scene.subset(np.flatnonzero(synth.floater_mask))
    init = initial_scene(gt, floaters, rng, options.init_color_noise, options.init_position_noise)
    save_ply(gt, root / "scene_gt.ply")
    save_ply(init, root / "scene_init.ply")

    t_noise, r_noise = options.pose_noise
    cams = list(cams_gt)
    if t_noise > 0 or r_noise > 0:
        for v in split.train:
            cams[v] = cams_gt[v].with_pose(perturb_pose(cams_gt[v].pose, rng, t_noise, r_noise))
    save_cameras(cams, root / "cameras.json")
    save_cameras(cams_gt, root / "cameras_gt.json")
    write_json(root / "split.json", split.to_dict())

    for v, out in enumerate(synth.renders):
        save_png(out.color, image_path(root, v))
    for v in split.train:
        save_pfm(synth.renders[v].depth, depth_path(root, v))

    for pv in split.pseudo:
        t = pv.view
        base = render(init, cams[t]).color
        stencil_seed = int(rng.integers(2**31))
        for k in pv.refs:
            cand = warp_from_reference(cams_gt[t], synth.renders[t].depth, cams_gt[k], synth.renders[k].depth,
                                       synth.renders[k].color, base)
            if options.ghost:
                cand = corrupt_frame(cand, "ghost-overlay", stencil_seed, patch_size=options.ghost_patch_size,
                                     ghost_alpha=options.ghost_alpha, margin=options.ghost_margin)
            save_png(cand, candidate_path(root, t, k))
        if options.ghost:
            st = corruption_stencil(base.shape, "ghost-overlay", stencil_seed, patch_size=options.ghost_patch_size,
                                    margin=options.ghost_margin)
            save_png(st.astype(np.float64), ghost_path(root, t))

    meta = {
        "scene": _spec_dict(options.scene),
        "pose_noise": list(options.pose_noise),
        "init_color_noise": options.init_color_noise,
        "init_position_noise": options.init_position_noise,
        "ghost": options.ghost,
        "ghost_patch_size": options.ghost_patch_size,
        "ghost_alpha": options.ghost_alpha,
        "ghost_margin": options.ghost_margin,
        "seed": options.seed,
        "floater_ids": synth.floater_ids.tolist(),
    }
    write_json(root / "meta.json", meta)
    return split


def _spec_dict(spec: SyntheticSceneSpec) -> dict:
    d = asdict(spec)
    return json_safe(d)


def json_safe(x):
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass
class Dataset:
    root: Path
    scene_init: GaussianScene
    cameras: list[Camera]
    split: Split
    cameras_gt: Optional[list[Camera]] = None
    images_dir: Optional[Path] = None
    depths_dir: Optional[Path] = None
    pseudo_dir: Optional[Path] = None

    def __post_init__(self):
        self.images_dir = Path(self.images_dir or Path(self.root) / "images")
        self.depths_dir = Path(self.depths_dir or Path(self.root) / "depths")
        self.pseudo_dir = Path(self.pseudo_dir or Path(self.root) / "pseudo")

    def image(self, view: int) -> np.ndarray:
        return _load(load_png, self.images_dir / f"view{view}.png")

    def depth(self, view: int) -> Optional[np.ndarray]:
        p = self.depths_dir / f"view{view}.pfm"
        return _load(load_pfm, p) if p.exists() else None

    def candidate(self, view: int, ref: int) -> np.ndarray:
        return _load(load_png, self.pseudo_dir / f"view{view}_from{ref}.png")

    def ghost_stencil(self, view: int) -> Optional[np.ndarray]:
        p = self.pseudo_dir / f"view{view}_ghost.png"
        return _load(load_png, p) > 0.5 if p.exists() else None


def _load(fn, path):
    if not Path(path).exists():
        raise DatasetError("file not found", path)
    try:
        return fn(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(str(exc), path) from exc


def load_dataset(root, images_dir=None, depths_dir=None, pseudo_dir=None, cameras_path=None,
                 require_depths: Optional[bool] = None) -> Dataset:
    """Read the dataset manifest files and verify that every referenced input file exists.

    Training depths are required when ``require_depths`` is true, or when it is None and the
    depth directory exists.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("dataset directory not found", root)
    scene = _load(load_ply, root / "scene_init.ply")
    cameras = _load(load_cameras, Path(cameras_path) if cameras_path else root / "cameras.json")
    split = Split.from_dict(_load(read_json, root / "split.json"))
    gt_path = root / "cameras_gt.json"
    cameras_gt = _load(load_cameras, gt_path) if gt_path.exists() else None
    ds = Dataset(root, scene, cameras, split, cameras_gt, images_dir, depths_dir, pseudo_dir)
    n = len(cameras)
    views = list(split.train) + [p.view for p in split.pseudo] + list(split.test)
    views += [r for p in split.pseudo for r in p.refs]
    for v in views:
        if not 0 <= v < n:
            raise DatasetError(f"split references view {v} but only {n} cameras exist", root / "split.json")
    needed = [ds.images_dir / f"view{v}.png" for v in split.train]
    needed += [ds.pseudo_dir / f"view{p.view}_from{k}.png" for p in split.pseudo for k in p.refs]
    if require_depths or (require_depths is None and ds.depths_dir.is_dir()):
        needed += [ds.depths_dir / f"view{v}.pfm" for v in split.train]
    for path in needed:
        if not path.exists():
            raise DatasetError("file not found", path)
    return ds
