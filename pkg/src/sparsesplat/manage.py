"""Scene-aware Gaussian pruning: depth-quantile clusters, k-NN density with a histogram-entropy
correction, a unified score, and seeded cluster-weighted random drops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera, camera_depths
from .scene import GaussianScene

DELTA = 1e-8
ENTROPY_EPS = 1e-12
CLUSTERS = ("near", "mid", "far")


class ManageError(ValueError):
    pass


@dataclass
class DepthPartition:
    tau1: float
    tau2: float
    b1: float
    b2: float
    labels: np.ndarray  # 0 near, 1 mid, 2 far

    def members(self, cluster: str) -> np.ndarray:
        return np.flatnonzero(self.labels == CLUSTERS.index(cluster))


@dataclass
class ImportanceReport:
    ids: np.ndarray
    depth: np.ndarray
    depth_score: np.ndarray
    density: np.ndarray
    density_norm: np.ndarray
    density_score: np.ndarray
    score: np.ndarray
    cluster: np.ndarray
    entropy: float
    partition: DepthPartition
    p_drop: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {
            "entropy": float(self.entropy),
            "tau": [self.partition.tau1, self.partition.tau2],
            "boundaries": [float(self.partition.b1), float(self.partition.b2)],
        }
        for name in ("ids", "depth", "depth_score", "density", "density_norm", "density_score", "score", "cluster"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        if self.p_drop is not None:
            out["p_drop"] = self.p_drop.tolist()
        return out


@dataclass
class DropLog:
    ids: np.ndarray
    score: np.ndarray
    p_drop: np.ndarray
    kept: np.ndarray  # the Bernoulli sample m_i (True = kept)
    seed: int

    @property
    def dropped_ids(self) -> np.ndarray:
        return self.ids[~self.kept]

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "ids": self.ids.tolist(),
            "score": self.score.tolist(),
            "p_drop": self.p_drop.tolist(),
            "kept": self.kept.astype(int).tolist(),
        }


def partition_depths(depths, tau1: float = 0.33, tau2: float = 0.66) -> DepthPartition:
    """Split depths at their empirical ``tau1`` and ``tau2`` quantiles (linear interpolation)."""
    d = np.asarray(depths, dtype=np.float64).ravel()
    if d.size < 3:
        raise ManageError(f"need at least 3 depths to partition, got {d.size}")
    if not (0.0 < tau1 < tau2 < 1.0):
        raise ManageError(f"percentiles must satisfy 0 < tau1 < tau2 < 1, got ({tau1}, {tau2})")
    b1, b2 = np.quantile(d, [tau1, tau2], method="linear")
    labels = np.where(d < b1, 0, np.where(d < b2, 1, 2))
    return DepthPartition(float(tau1), float(tau2), float(b1), float(b2), labels)


def depth_scores(depths, delta: float = DELTA) -> np.ndarray:
    """``1 - (d - d_min) / (d_max - d_min + delta)``: near Gaussians score close to 1."""
    d = np.asarray(depths, dtype=np.float64)
    if d.size == 0:
        raise ManageError("depth_scores needs at least one depth")
    return 1.0 - (d - d.min()) / (d.max() - d.min() + delta)


def density_estimate(centers, k: int = 8, delta: float = DELTA) -> np.ndarray:
    """Inverse mean distance to the ``k`` nearest other centers."""
    pts = np.asarray(centers.centers if isinstance(centers, GaussianScene) else centers, dtype=np.float64)
    if len(pts) < k + 1:
        raise ManageError(f"density with k={k} needs at least {k + 1} Gaussians, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    return 1.0 / (dist[:, 1:].mean(axis=1) + delta)


def density_entropy(rho, bins: int = 32, eps: float = ENTROPY_EPS) -> float:
    """Shannon entropy of the ``bins``-bin histogram of ``rho`` over its range, divided by log(bins)."""
    if bins < 2:
        raise ManageError("entropy needs at least 2 bins")
    r = np.asarray(rho, dtype=np.float64).ravel()
    if r.size == 0:
        raise ManageError("entropy of an empty density list")
    lo, span = r.min(), r.max() - r.min()
    if span > 0:
        # the small offset keeps bin membership stable when rho is rescaled
        idx = np.clip(np.floor((r - lo) / span * bins + 1e-9), 0, bins - 1).astype(np.int64)
    else:
        idx = np.zeros(r.size, np.int64)
    p = np.bincount(idx, minlength=bins) / r.size
    return float(-(p * np.log(p + eps)).sum() / np.log(bins))


def mean_view_depth(centers, cameras: Sequence[Camera]) -> np.ndarray:
    """Mean camera-frame depth over the views each center lies in front of.

    Centers behind every camera get the largest observed depth.
    """
    pts = np.asarray(centers, dtype=np.float64)
    z = np.stack([camera_depths(cam, pts) for cam in cameras])  # (V, N)
    front = z > 0
    count = front.sum(0)
    total = np.where(front, z, 0.0).sum(0)
    depth = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    if np.all(np.isnan(depth)):
        return np.zeros(len(pts))
    return np.where(np.isnan(depth), np.nanmax(depth), depth)


def importance_scores(scene: GaussianScene, cameras: Union[Camera, Sequence[Camera]], alpha: float = 0.5,
                      beta: float = 0.5, gamma: float = 0.5, bins: int = 32, k: int = 8,
                      tau: tuple[float, float] = (0.33, 0.66)) -> ImportanceReport:
    """Per-Gaussian depth, density and unified scores; depth is taken over ``cameras``."""
    for name, v in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not 0.0 <= v <= 1.0:
            raise ManageError(f"{name} must lie in [0, 1], got {v}")
    cams = [cameras] if isinstance(cameras, Camera) else list(cameras)
    if not cams:
        raise ManageError("importance_scores needs at least one camera")
    depth = mean_view_depth(scene.centers, cams)
    s_z = depth_scores(depth)
    rho = density_estimate(scene.centers, k)
    rho_n = (rho - rho.min()) / (rho.max() - rho.min() + DELTA)
    H = density_entropy(rho, bins)
    s_rho = np.clip(rho_n * (1.0 - beta * H) + gamma * H, 0.0, 1.0)
    S = np.clip(alpha * s_z + (1.0 - alpha) * s_rho, 0.0, 1.0)
    part = partition_depths(depth, *tau)
    return ImportanceReport(scene.ids.copy(), depth, s_z, rho, rho_n, s_rho, S, part.labels, H, part)


def drop_probabilities(score, cluster, r: float = 0.1, weights: Sequence[float] = (1.5, 1.0, 0.5)) -> np.ndarray:
    if not 0.0 <= r <= 1.0:
        raise ManageError(f"drop rate must lie in [0, 1], got {r}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0):
        raise ManageError(f"need three non-negative cluster weights, got {weights}")
    return np.clip(r * w[np.asarray(cluster)] * np.asarray(score, dtype=np.float64), 0.0, 1.0)


def apply_drop(scene: GaussianScene, report: ImportanceReport, r: float = 0.1,
               weights: Sequence[float] = (1.5, 1.0, 0.5), seed: int = 0) -> tuple[GaussianScene, DropLog]:
    """Remove each Gaussian with probability ``clamp(r * w_cluster * S)``; fully determined by ``seed``."""
    if len(report.ids) != len(scene) or not np.array_equal(report.ids, scene.ids):
        raise ManageError("report does not describe this scene")
    p = drop_probabilities(report.score, report.cluster, r, weights)
    report.p_drop = p
    kept = np.random.default_rng(seed).random(len(scene)) >= p
    log = DropLog(scene.ids.copy(), report.score.copy(), p, kept, seed)
    return scene.subset(np.flatnonzero(kept)), log


def spgm_pass(scene: GaussianScene, cameras, r: float = 0.1, weights=(1.5, 1.0, 0.5), seed: int = 0,
              **score_kw) -> tuple[GaussianScene, ImportanceReport, DropLog]:
    report = importance_scores(scene, cameras, **score_kw)
    pruned, log = apply_drop(scene, report, r, weights, seed)
    return pruned, report, log
