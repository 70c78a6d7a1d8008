"""Overlap scoring between two depth-registered views and confidence-weighted fusion of two
restoration candidates into one repaired pseudo frame."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Camera, backproject_depth_map, project_points

EPS = 1e-6


class FusionError(ValueError):
    pass


@dataclass
class OverlapResult:
    overlap_mask: np.ndarray  # H x W bool
    depth_score: np.ndarray  # H x W in [0, 1]
    pose_score: float  # (0, 1]
    confidence: np.ndarray  # H x W in [0, 1], zero outside the mask
    reprojected: Optional[np.ndarray] = None  # H x W x 2 pixel coordinates in view b (nan if invalid)
    transported_depth: Optional[np.ndarray] = None  # H x W depth of the transported point in view b
    sampled_depth: Optional[np.ndarray] = None  # H x W d_b at the reprojected pixel (0 if invalid)


@dataclass
class FusionInput:
    base: np.ndarray  # I_t, H x W x 3
    candidate_prev: np.ndarray
    candidate_next: np.ndarray
    depth_t: np.ndarray
    camera_t: Camera
    camera_prev: Camera
    camera_next: Camera
    depth_prev: np.ndarray
    depth_next: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.base)
        for name in ("candidate_prev", "candidate_next"):
            if np.shape(getattr(self, name)) != shape:
                raise FusionError(f"{name} has shape {np.shape(getattr(self, name))}, base has {shape}")
        if np.shape(self.depth_t) != shape[:2]:
            raise FusionError(f"depth_t has shape {np.shape(self.depth_t)}, expected {shape[:2]}")
        for name in ("depth_t", "depth_prev", "depth_next"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise FusionError(f"{name} contains negative depths")


def pose_consistency(cam_a: Camera, cam_b: Camera) -> float:
    """exp(-||t_a - t_b||) on the stored world-to-camera translations."""
    return float(np.exp(-np.linalg.norm(cam_a.pose.translation - cam_b.pose.translation)))


def overlap_score(cam_a: Camera, depth_a, cam_b: Camera, depth_b, eps: float = EPS) -> OverlapResult:
    """Per-pixel visibility of view a inside view b, depth agreement and combined confidence.

    Depth in view b is looked up at the nearest pixel to the reprojected location.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    if depth_a.shape != cam_a.shape:
        raise FusionError(f"depth_a shape {depth_a.shape} does not match camera a {cam_a.shape}")
    if depth_b.shape != cam_b.shape:
        raise FusionError(f"depth_b shape {depth_b.shape} does not match camera b {cam_b.shape}")
    H, W = depth_a.shape
    Hb, Wb = depth_b.shape

    has_depth = depth_a > eps
    pts = backproject_depth_map(cam_a, np.where(has_depth, depth_a, 1.0)).reshape(-1, 3)
    uv, z = project_points(cam_b, pts)
    uv = uv.reshape(H, W, 2)
    z = z.reshape(H, W)
    in_front = has_depth & (z > 1e-4)
    # nearest pixel center; bounds checked on the rounded index
    ui = np.where(in_front, np.rint(uv[..., 0]), -1).astype(np.int64)
    vi = np.where(in_front, np.rint(uv[..., 1]), -1).astype(np.int64)
    inside = in_front & (ui >= 0) & (ui < Wb) & (vi >= 0) & (vi < Hb)
    d_b = np.zeros((H, W))
    d_b[inside] = depth_b[vi[inside], ui[inside]]
    mask = inside & (d_b > eps)

    score = np.zeros((H, W))
    da, db = depth_a[mask], d_b[mask]
    score[mask] = np.exp(-np.abs(da - db) / ((da + db) / 2.0 + eps))
    s_t = pose_consistency(cam_a, cam_b)
    conf = np.where(mask, score * s_t, 0.0)
    reproj = np.where(mask[..., None], uv, np.nan)
    return OverlapResult(mask, score, s_t, conf, reproj, np.where(mask, z, 0.0), d_b)


def fusion_weights(conf_1, conf_2, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    denom = np.asarray(conf_1) + np.asarray(conf_2) + eps
    return conf_1 / denom, conf_2 / denom


def blend_residuals(base, candidates, weights) -> np.ndarray:
    """``base + sum_i W_i * (candidate_i - base)`` clamped to [0, 1]."""
    base = np.asarray(base, dtype=np.float64)
    fused = base.copy()
    for cand, w in zip(candidates, weights):
        r = np.asarray(cand, dtype=np.float64) - base
        fused += (w[..., None] if r.ndim == 3 else w) * r
    return np.clip(fused, 0.0, 1.0)


def fuse_bidirectional(inp: FusionInput, eps: float = EPS):
    """Fuse both candidates with overlap-confidence weights. Returns ``(fused, (W1, W2))``."""
    c1 = overlap_score(inp.camera_t, inp.depth_t, inp.camera_prev, inp.depth_prev, eps).confidence
    c2 = overlap_score(inp.camera_t, inp.depth_t, inp.camera_next, inp.depth_next, eps).confidence
    w1, w2 = fusion_weights(c1, c2, eps)
    return blend_residuals(inp.base, (inp.candidate_prev, inp.candidate_next), (w1, w2)), (w1, w2)


def fuse_single(inp: FusionInput, eps: float = EPS):
    """Single-reference variant: only the previous-reference candidate contributes."""
    c1 = overlap_score(inp.camera_t, inp.depth_t, inp.camera_prev, inp.depth_prev, eps).confidence
    w1 = c1 / (c1 + eps)
    w2 = np.zeros_like(w1)
    return blend_residuals(inp.base, (inp.candidate_prev, inp.candidate_next), (w1, w2)), (w1, w2)


def warp_from_reference(cam_t: Camera, depth_t, cam_ref: Camera, depth_ref, image_ref, fallback,
                        occlusion_tolerance: float = 0.05) -> np.ndarray:
    """Pull reference colors into view t wherever view t reprojects onto matching reference depth.

    A pixel is taken from the reference only if its transported depth agrees with the reference
    depth within ``occlusion_tolerance`` (relative); other pixels keep ``fallback``.
    """
    ov = overlap_score(cam_t, depth_t, cam_ref, depth_ref)
    out = np.asarray(fallback, dtype=np.float64).copy()
    m = ov.overlap_mask & (np.abs(ov.transported_depth - ov.sampled_depth) <= occlusion_tolerance * ov.sampled_depth)
    uv = ov.reprojected[m]
    ui, vi = np.rint(uv[:, 0]).astype(np.int64), np.rint(uv[:, 1]).astype(np.int64)
    out[m] = np.asarray(image_ref)[vi, ui]
    return out
