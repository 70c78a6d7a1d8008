"""Two-stage optimization of a Gaussian scene against real and pseudo frames.

Stage one fits per-view pose deltas and affine exposure with the scene frozen, stage two moves
Gaussians and poses together under the confidence-weighted RGB-D loss (with optional pruning
passes), and a final pass refines Gaussians alone with an L1 + SSIM objective.

All descent runs through :class:`AdaptiveDescent`: Adam-style per-parameter step sizes with a
backtracking line search, so every recorded loss history is non-increasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from . import manage
from .geometry import Camera, RigidPose, so3_exp, so3_log
from .render import ALPHA_FLOOR, DTYPE, as_tensor, render_tensors, scene_tensors, tensors_to_scene
from .scene import GaussianScene

log = logging.getLogger(__name__)

GAUSSIAN_KEYS = ("centers", "log_scales", "rotations", "opacity_logits", "colors")
MASK_LEVELS = (0.0, 0.5, 1.0)


class OptimError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite or keeps rising; carries the loss trace."""

    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


# ---------------------------------------------------------------------------
# parameter types


@dataclass
class ExposureParams:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise OptimError(f"exposure gain must be positive, got {self.a}")

    @property
    def log_a(self) -> float:
        return float(np.log(self.a))

    def vector(self) -> np.ndarray:
        return np.array([self.log_a, self.b])

    @classmethod
    def from_vector(cls, vec) -> "ExposureParams":
        return cls(float(np.exp(vec[0])), float(vec[1]))

    def inverse(self) -> "ExposureParams":
        return ExposureParams(1.0 / self.a, -self.b / self.a)


@dataclass
class PoseDelta:
    """Left-multiplicative correction: ``R = Exp(omega) R0``, ``t = Exp(omega) t0 + v``."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @classmethod
    def from_vector(cls, vec) -> "PoseDelta":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], vec[3:6])

    def apply(self, pose: RigidPose) -> RigidPose:
        dR = so3_exp(self.omega)
        return RigidPose.from_matrix(dR @ pose.R, dR @ pose.translation + self.v)

    @classmethod
    def between(cls, base: RigidPose, target: RigidPose) -> "PoseDelta":
        """The delta taking ``base`` to ``target``."""
        dR = target.R @ base.R.T
        return cls(so3_log(dR), target.translation - dR @ base.translation)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.95
    lambda_s: float = 1.0
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise OptimError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise OptimError(f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")
        if self.lambda_s < 0:
            raise OptimError(f"lambda_s must be non-negative, got {self.lambda_s}")


@dataclass
class TrainingFrame:
    image: np.ndarray  # H x W x 3
    camera: Camera
    depth: Optional[np.ndarray] = None  # H x W, 0 = unknown
    mask: Optional[np.ndarray] = None  # H x W in {0, 0.5, 1}; None means all ones
    is_pseudo: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        H, W = self.camera.shape
        if self.image.shape != (H, W, 3):
            raise OptimError(f"frame image {self.image.shape} does not match camera {(H, W)}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (H, W):
                raise OptimError(f"frame depth {self.depth.shape} does not match camera {(H, W)}")
        if self.mask is None:
            self.mask = np.ones((H, W))
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != (H, W):
            raise OptimError(f"frame mask {self.mask.shape} does not match camera {(H, W)}")
        if not np.all(np.isin(self.mask, MASK_LEVELS)):
            raise OptimError("confidence mask values must be 0, 0.5 or 1")

    @property
    def camera_id(self) -> int:
        return self.camera.id


# ---------------------------------------------------------------------------
# losses


def apply_exposure(image, params: ExposureParams, clamp: bool = False) -> np.ndarray:
    out = params.a * np.asarray(image, dtype=np.float64) + params.b
    return np.clip(out, 0.0, 1.0) if clamp else out


def _unit_max(mask: torch.Tensor) -> torch.Tensor:
    # dividing by the max makes {0, c/2, c} masks collapse to the same values for every c > 0
    top = mask.max()
    return mask / top if top > 0 else mask


def masked_l1_t(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``sum(m * |pred - target|) / sum(m)``; per-pixel masks broadcast over channels."""
    m = _unit_max(mask)
    if pred.dim() == 3:
        m = m[..., None].expand_as(pred)
    denom = m.sum()
    if denom <= 0:
        return torch.zeros((), dtype=pred.dtype)
    return (m * (pred - target).abs()).sum() / denom


def scale_cap(centers) -> float:
    """Five times the median nearest-neighbor distance between centers."""
    pts = np.asarray(centers, dtype=np.float64)
    if len(pts) < 2:
        return np.inf
    d, _ = cKDTree(pts).query(pts, k=2)
    return 5.0 * float(np.median(d[:, 1]))


def scale_penalty_t(log_scales: torch.Tensor, cap: float) -> torch.Tensor:
    if log_scales.shape[0] == 0 or not np.isfinite(cap):
        return torch.zeros((), dtype=log_scales.dtype)
    excess = torch.clamp(torch.exp(log_scales).max(dim=1).values - cap, min=0.0)
    return (excess * excess).mean()


@dataclass
class LossTerms:
    total: float
    rgb: float
    depth: float
    scale: float
    empty_mask: bool = False


def rgbd_loss_t(color, depth, alpha, frame: TrainingFrame, weights: LossWeights, log_scales, cap):
    """Torch form of the confidence-weighted RGB-D loss: (total, rgb, depth, scale, empty)."""
    mask = as_tensor(frame.mask)
    empty = bool(frame.mask.max() <= 0)
    rgb = masked_l1_t(color, as_tensor(frame.image), mask)
    if frame.depth is not None:
        valid = (alpha >= ALPHA_FLOOR).detach() & (as_tensor(frame.depth) > 0)
        d_term = masked_l1_t(depth, as_tensor(frame.depth), mask * valid.to(DTYPE))
    else:
        d_term = torch.zeros((), dtype=DTYPE)
    s_term = scale_penalty_t(log_scales, cap)
    total = weights.beta * rgb + (1.0 - weights.beta) * d_term + weights.lambda_s * s_term
    return total, rgb, d_term, s_term, empty


def masked_rgbd_loss(rendered, frame: TrainingFrame, weights: LossWeights = LossWeights(),
                     scene: Optional[GaussianScene] = None) -> LossTerms:
    """Evaluate the loss for a finished render (``RenderOutput``-like, unclamped color preferred)."""
    color = as_tensor(rendered.color)
    if color.shape != frame.image.shape:
        raise OptimError(f"render {tuple(color.shape)} and frame {frame.image.shape} differ")
    log_scales = as_tensor(scene.log_scales) if scene is not None else torch.zeros((0, 3), dtype=DTYPE)
    cap = scale_cap(scene.centers) if scene is not None else np.inf
    total, rgb, d, s, empty = rgbd_loss_t(color, as_tensor(rendered.depth), as_tensor(rendered.alpha), frame,
                                          weights, log_scales, cap)
    return LossTerms(float(total), float(rgb), float(d), float(s), empty)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_t(img_a: torch.Tensor, img_b: torch.Tensor, window: int = 11, sigma: float = 1.5,
           c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    """Mean SSIM over all full windows and channels (inputs H x W or H x W x C in [0, 1])."""
    if img_a.shape != img_b.shape:
        raise OptimError(f"ssim inputs differ in shape: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    if img_a.shape[0] < window or img_a.shape[1] < window:
        raise OptimError(f"ssim needs images of at least {window}x{window}, got {tuple(img_a.shape[:2])}")
    a = img_a if img_a.dim() == 3 else img_a[..., None]
    b = img_b if img_b.dim() == 3 else img_b[..., None]
    C = a.shape[2]
    a = a.permute(2, 0, 1)[None]
    b = b.permute(2, 0, 1)[None]
    k = _gaussian_window(window, sigma).expand(C, 1, window, window)

    def blur(x):
        return F.conv2d(x, k, groups=C)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def ssim(img_a, img_b) -> float:
    return float(ssim_t(as_tensor(img_a), as_tensor(img_b)))


def refine_loss_t(color: torch.Tensor, frame: TrainingFrame, lambda_ssim: float) -> torch.Tensor:
    mask = as_tensor(frame.mask)
    target = as_tensor(frame.image)
    l1 = masked_l1_t(color, target, mask)
    if lambda_ssim == 0.0:
        return l1
    m = mask[..., None]
    d_ssim = 1.0 - ssim_t(m * color, m * target)
    if lambda_ssim == 1.0:
        return d_ssim
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * d_ssim


def refine_loss(rendered, frame: TrainingFrame, lambda_ssim: float = 0.2) -> float:
    if not 0.0 <= lambda_ssim <= 1.0:
        raise OptimError(f"lambda_ssim must lie in [0, 1], got {lambda_ssim}")
    color = rendered.color if hasattr(rendered, "color") else rendered
    return float(refine_loss_t(as_tensor(color), frame, lambda_ssim))


# ---------------------------------------------------------------------------
# descent


@dataclass
class DescentConfig:
    iterations: int = 100
    lr: dict = field(default_factory=dict)
    lr_final_ratio: float = 0.1  # learning rates decay geometrically to this fraction
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    max_backtracks: int = 8
    divergence_patience: int = 20


class AdaptiveDescent:
    """Adam-style steps on a dict of tensors, each step accepted only if the loss does not rise.

    A rejected trial halves the step (up to ``max_backtracks`` times); if every trial fails the
    parameters stay put. ``project`` may clamp trial parameters in place before evaluation.
    """

    def __init__(self, params: dict, lr: dict, config: DescentConfig,
                 project: Optional[Callable[[dict], None]] = None):
        self.params = {k: v.detach().clone() for k, v in params.items()}
        self.lr = dict(lr)
        self.config = config
        self.project = project
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.t = 0
        self.rises = 0

    def subset(self, key_rows: dict) -> None:
        """Keep only the given rows of the listed parameters (after pruning)."""
        for k, rows in key_rows.items():
            idx = torch.as_tensor(rows, dtype=torch.long)
            self.params[k] = self.params[k][idx].clone()
            self.m[k] = self.m[k][idx].clone()
            self.v[k] = self.v[k][idx].clone()

    def step(self, closure: Callable[[dict, bool], torch.Tensor], loss0: float,
             lr_scale: float = 1.0) -> tuple[float, bool]:
        """One step; returns ``(loss, accepted)``. A rejected step leaves parameters unchanged."""
        params = {k: v.clone().requires_grad_(True) for k, v in self.params.items()}
        loss = closure(params, True)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {float(loss.detach())} at step {self.t}")
        keys = [k for k in params if self.lr.get(k, 0.0) > 0.0]
        grads = torch.autograd.grad(loss, [params[k] for k in keys], allow_unused=True)
        base = float(loss.detach())
        self.t += 1
        c = self.config
        direction = {}
        for k, g in zip(keys, grads):
            if g is None:
                continue
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1**self.t)
            vhat = self.v[k] / (1 - c.beta2**self.t)
            direction[k] = mhat / (torch.sqrt(vhat) + c.eps)
        if not direction:
            return base, False
        reference = min(base, loss0)
        step = lr_scale
        for _ in range(c.max_backtracks + 1):
            trial = {k: v.clone() for k, v in self.params.items()}
            for k, d in direction.items():
                trial[k] = trial[k] - step * self.lr[k] * d
            if self.project is not None:
                self.project(trial)
            with torch.no_grad():
                value = float(closure(trial, False))
            if np.isfinite(value) and value <= reference:
                if value > base:
                    self.rises += 1
                    if self.rises >= c.divergence_patience:
                        raise DivergenceError(f"loss rose on {self.rises} consecutive accepted steps")
                else:
                    self.rises = 0
                self.params = trial
                return value, True
            step *= 0.5
        return reference, False


def _lr_scale(config: DescentConfig, it: int) -> float:
    if config.iterations <= 1:
        return 1.0
    return config.lr_final_ratio ** (it / (config.iterations - 1))


def _clamp_gaussians(p: dict) -> None:
    if "colors" in p:
        p["colors"].clamp_(0.0, 1.0)
    if "opacity_logits" in p:
        p["opacity_logits"].clamp_(-12.0, 12.0)
    if "log_scales" in p:
        p["log_scales"].clamp_(-12.0, 3.0)


# ---------------------------------------------------------------------------
# stage one: per-view pose and exposure


@dataclass
class StabilizeResult:
    poses: list[PoseDelta]
    exposures: list[ExposureParams]
    histories: list[list[float]]


DEFAULT_POSE_LR = {"delta_rot": 6e-3, "delta_trans": 1.5e-2, "log_a": 1e-2, "b": 5e-3}


def stabilize_poses(scene: GaussianScene, frames: Sequence[TrainingFrame], iterations: int = 100,
                    lr: Optional[dict] = None, weights: LossWeights = LossWeights(),
                    initial: Optional[Sequence[PoseDelta]] = None, lr_final_ratio: float = 0.05,
                    fit_exposure: bool = True) -> StabilizeResult:
    """Fit a pose delta and ``(log a, b)`` per frame with the scene frozen.

    Views are independent, so each is optimized on its own loss with its own line search.
    """
    rates = {**DEFAULT_POSE_LR, **(lr or {})}
    if not fit_exposure:
        rates["log_a"] = rates["b"] = 0.0
    params = scene_tensors(scene)
    cap = scale_cap(scene.centers)
    log_scales = params["log_scales"]
    cfg = DescentConfig(iterations=iterations, lr_final_ratio=lr_final_ratio)
    poses, exposures, histories = [], [], []
    for i, frame in enumerate(frames):
        start = initial[i].vector() if initial is not None else np.zeros(6)

        def closure(p, _grad, frame=frame):
            delta = torch.cat([p["delta_rot"], p["delta_trans"]])
            expo = torch.stack([p["log_a"][0], p["b"][0]])
            color, depth, alpha = render_tensors(params, scene.ids, frame.camera, delta, expo)
            return rgbd_loss_t(color, depth, alpha, frame, weights, log_scales, cap)[0]

        state = {
            "delta_rot": as_tensor(start[:3]),
            "delta_trans": as_tensor(start[3:]),
            "log_a": as_tensor([0.0]),
            "b": as_tensor([0.0]),
        }
        opt = AdaptiveDescent(state, rates, cfg)
        with torch.no_grad():
            current = float(closure(opt.params, False))
        hist = []
        for it in range(iterations):
            current, _ = opt.step(closure, current, _lr_scale(cfg, it))
            hist.append(current)
        p = opt.params
        poses.append(PoseDelta(p["delta_rot"].numpy().copy(), p["delta_trans"].numpy().copy()))
        exposures.append(ExposureParams.from_vector([float(p["log_a"][0]), float(p["b"][0])]))
        histories.append(hist)
    return StabilizeResult(poses, exposures, histories)


# ---------------------------------------------------------------------------
# stage two: joint descent


@dataclass
class SpgmSchedule:
    every: int = 0  # 0 disables pruning passes
    r: float = 0.1
    weights: tuple[float, float, float] = (1.5, 1.0, 0.5)
    tau: tuple[float, float] = (0.33, 0.66)
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    bins: int = 32
    k: int = 8
    seed: int = 0


DEFAULT_GAUSSIAN_LR = {
    "centers": 2e-3,
    "log_scales": 5e-3,
    "rotations": 5e-3,
    "opacity_logits": 2e-2,
    "colors": 5e-3,
}


@dataclass
class JointSchedule:
    iterations: int = 100
    lr: dict = field(default_factory=dict)
    lr_final_ratio: float = 0.1
    optimize_poses: bool = True
    weights: LossWeights = LossWeights()
    spgm: SpgmSchedule = field(default_factory=SpgmSchedule)


@dataclass
class HistoryRow:
    iteration: int
    total: float
    rgb: float
    depth: float
    scale: float


@dataclass
class JointResult:
    scene: GaussianScene
    poses: list[PoseDelta]
    exposures: list[ExposureParams]
    history: list[HistoryRow]
    spgm_logs: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.total for h in self.history]


def _frame_terms(params, ids, frames, poses_t, expos, weights, cap):
    totals = torch.zeros((), dtype=DTYPE)
    parts = np.zeros(3)
    for i, frame in enumerate(frames):
        delta = poses_t(i)
        color, depth, alpha = render_tensors(params, ids, frame.camera, delta, expos[i])
        total, rgb, d, s, _ = rgbd_loss_t(color, depth, alpha, frame, weights, params["log_scales"], cap)
        totals = totals + total
        parts += [float(rgb.detach()), float(d.detach()), float(s.detach())]
    n = max(len(frames), 1)
    return totals / n, parts / n


def joint_optimize(scene: GaussianScene, frames: Sequence[TrainingFrame], schedule: JointSchedule = JointSchedule(),
                   poses: Optional[Sequence[PoseDelta]] = None,
                   exposures: Optional[Sequence[ExposureParams]] = None) -> JointResult:
    """Descend the mean frame loss over Gaussians and (optionally) pose deltas.

    Exposure stays at the values found by :func:`stabilize_poses`. With ``schedule.spgm.every``
    set, a pruning pass runs after every that many iterations; pruning can raise the loss, so
    the history is non-increasing only between passes.
    """
    n = len(frames)
    poses = list(poses) if poses is not None else [PoseDelta() for _ in range(n)]
    exposures = list(exposures) if exposures is not None else [ExposureParams() for _ in range(n)]
    if len(poses) != n or len(exposures) != n:
        raise OptimError("need one pose delta and one exposure per frame")
    history: list[HistoryRow] = []
    if schedule.iterations == 0 or n == 0:
        return JointResult(scene.copy(), poses, exposures, history)

    rates = {**DEFAULT_GAUSSIAN_LR, **{k: v for k, v in schedule.lr.items() if k in DEFAULT_GAUSSIAN_LR}}
    state = scene_tensors(scene)
    if schedule.optimize_poses:
        state["pose"] = as_tensor(np.stack([p.vector() for p in poses]))
        rates["pose"] = schedule.lr.get("pose", 1e-3)
    expos = [as_tensor(e.vector()) for e in exposures]
    fixed_poses = [as_tensor(p.vector()) for p in poses]
    ids = scene.ids.copy()
    cfg = DescentConfig(iterations=schedule.iterations, lr_final_ratio=schedule.lr_final_ratio)
    opt = AdaptiveDescent(state, rates, cfg, project=_clamp_gaussians)
    cap = scale_cap(scene.centers)
    spgm_logs = []

    parts = {"last": np.zeros(3)}

    def closure(p, _grad):
        pose_of = (lambda i: p["pose"][i]) if "pose" in p else (lambda i: fixed_poses[i])
        total, terms = _frame_terms(p, ids, frames, pose_of, expos, schedule.weights, cap)
        parts["last"] = terms
        return total

    with torch.no_grad():
        current = float(closure(opt.params, False))
    accepted_parts = parts["last"]
    sp = schedule.spgm
    for it in range(schedule.iterations):
        current, accepted = opt.step(closure, current, _lr_scale(cfg, it))
        if accepted:
            accepted_parts = parts["last"]
        history.append(HistoryRow(it, current, *map(float, accepted_parts)))
        if sp.every and (it + 1) % sp.every == 0 and it + 1 < schedule.iterations:
            snapshot = tensors_to_scene({k: opt.params[k] for k in GAUSSIAN_KEYS}, ids)
            cams = [f.camera for f in frames]
            report = manage.importance_scores(snapshot, cams, sp.alpha, sp.beta, sp.gamma, sp.bins, sp.k, sp.tau)
            pruned, drop_log = manage.apply_drop(snapshot, report, sp.r, sp.weights, sp.seed + len(spgm_logs))
            spgm_logs.append(drop_log)
            opt.subset({k: np.flatnonzero(drop_log.kept) for k in GAUSSIAN_KEYS})
            ids = pruned.ids.copy()
            cap = scale_cap(opt.params["centers"].numpy())
            with torch.no_grad():
                current = float(closure(opt.params, False))
            accepted_parts = parts["last"]
            log.info("pruning pass at iteration %d removed %d Gaussians", it + 1, int((~drop_log.kept).sum()))

    out_scene = tensors_to_scene({k: opt.params[k] for k in GAUSSIAN_KEYS}, ids)
    if "pose" in opt.params:
        poses = [PoseDelta.from_vector(v) for v in opt.params["pose"].numpy()]
    return JointResult(out_scene, poses, exposures, history, spgm_logs)


# ---------------------------------------------------------------------------
# stage three: appearance refinement


def refine(scene: GaussianScene, frames: Sequence[TrainingFrame], iterations: int = 100, lambda_ssim: float = 0.2,
           poses: Optional[Sequence[PoseDelta]] = None, exposures: Optional[Sequence[ExposureParams]] = None,
           lr: Optional[dict] = None, lr_final_ratio: float = 0.1) -> tuple[GaussianScene, list[float]]:
    """Descend the mean masked L1 + SSIM loss over Gaussian parameters with poses frozen."""
    if not 0.0 <= lambda_ssim <= 1.0:
        raise OptimError(f"lambda_ssim must lie in [0, 1], got {lambda_ssim}")
    n = len(frames)
    if iterations == 0 or n == 0:
        return scene.copy(), []
    fixed = [as_tensor(p.vector()) for p in poses] if poses is not None else [None] * n
    expos = [as_tensor(e.vector()) for e in exposures] if exposures is not None else [None] * n
    rates = {**DEFAULT_GAUSSIAN_LR, **(lr or {})}
    cfg = DescentConfig(iterations=iterations, lr_final_ratio=lr_final_ratio)
    opt = AdaptiveDescent(scene_tensors(scene), rates, cfg, project=_clamp_gaussians)

    def closure(p, _grad):
        total = torch.zeros((), dtype=DTYPE)
        for i, frame in enumerate(frames):
            color, _, _ = render_tensors(p, scene.ids, frame.camera, fixed[i], expos[i])
            total = total + refine_loss_t(color, frame, lambda_ssim)
        return total / n

    with torch.no_grad():
        current = float(closure(opt.params, False))
    history = []
    for it in range(iterations):
        current, _ = opt.step(closure, current, _lr_scale(cfg, it))
        history.append(current)
    return tensors_to_scene(opt.params, scene.ids), history


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w") as f:
        f.write("iter,total,rgb,depth,scale\n")
        for h in history:
            f.write(f"{h.iteration},{h.total!r},{h.rgb!r},{h.depth!r},{h.scale!r}\n")


def posed_cameras(frames: Sequence[TrainingFrame], poses: Sequence[PoseDelta]) -> list[Camera]:
    return [f.camera.with_pose(p.apply(f.camera.pose)) for f, p in zip(frames, poses)]
