"""Image and trajectory metrics: PSNR, SSIM and absolute trajectory error."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .geometry import RigidPose
from .optim import ssim

__all__ = ["psnr", "ssim", "umeyama_alignment", "ate_rmse", "AlignmentWarning"]


class MetricError(ValueError):
    pass


class AlignmentWarning(UserWarning):
    pass


def psnr(img_a, img_b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def umeyama_alignment(src, dst, with_scale: bool = True):
    """Least-squares ``s, R, t`` with ``dst ~ s R src + t`` (Umeyama's closed form)."""
    x = np.asarray(src, dtype=np.float64)
    y = np.asarray(dst, dtype=np.float64)
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / len(x)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = (xc**2).sum() / len(x)
    s = float(np.trace(np.diag(d) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return s, R, t


def _degenerate(points, tol: float = 1e-9) -> bool:
    """True when the points have zero spread or lie on a line, leaving the alignment ill-posed."""
    c = points - points.mean(0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[0] <= tol or sv[1] <= tol * max(sv[0], 1.0)


def ate_rmse(estimated: Sequence[RigidPose], reference: Sequence[RigidPose], alignment: str = "similarity") -> float:
    """RMSE between camera centers after aligning the estimate onto the reference.

    ``alignment`` is ``"similarity"`` (default), ``"rigid"`` or ``"none"``. Collinear or
    coincident centers make the rotation ambiguous; a warning is issued and rigid alignment used.
    """
    if len(estimated) != len(reference):
        raise MetricError(f"trajectories differ in length: {len(estimated)} vs {len(reference)}")
    if len(estimated) < 3:
        raise MetricError("ATE needs at least 3 poses")
    if alignment not in ("similarity", "rigid", "none"):
        raise MetricError(f"unknown alignment {alignment!r}")
    est = np.array([p.center for p in estimated])
    ref = np.array([p.center for p in reference])
    if alignment == "none":
        aligned = est
    else:
        with_scale = alignment == "similarity"
        if _degenerate(est) or _degenerate(ref):
            warnings.warn("degenerate trajectory for alignment; falling back to rigid", AlignmentWarning, stacklevel=2)
            with_scale = False
        s, R, t = umeyama_alignment(est, ref, with_scale)
        aligned = s * est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - ref) ** 2, axis=1))))
