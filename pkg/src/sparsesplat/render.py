"""Forward Gaussian splatting on the CPU with autograd-backed parameter gradients.

Global depth sort (ties broken by id), EWA projection of each covariance, front-to-back
alpha compositing over each footprint's bounding box. Footprints are truncated at 3 sigma with a
C1 taper so that finite differences stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .geometry import Camera
from .scene import GaussianScene

DTYPE = torch.float64
ALPHA_FLOOR = 1e-4
DEPTH_FULL_ALPHA = 0.05
DILATION = 0.3
TRUNCATION = 3.0
NEAR_PLANE = 0.01

_CUT = float(np.exp(-0.5 * TRUNCATION**2))


@dataclass
class RenderOutput:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, 0 where alpha < ALPHA_FLOOR
    alpha: np.ndarray  # H x W


@dataclass
class RenderGradients:
    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose: np.ndarray  # (6,) rotation delta then translation delta
    exposure: np.ndarray  # (2,) d/d(log a), d/db


# ---------------------------------------------------------------------------
# torch helpers


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def scene_tensors(scene: GaussianScene, requires_grad: bool = False) -> dict:
    return {
        "centers": as_tensor(scene.centers, requires_grad),
        "log_scales": as_tensor(scene.log_scales, requires_grad),
        "rotations": as_tensor(scene.rotations, requires_grad),
        "opacity_logits": as_tensor(scene.opacity_logits, requires_grad),
        "colors": as_tensor(scene.colors, requires_grad),
    }


def tensors_to_scene(params: dict, ids) -> GaussianScene:
    def np_(k):
        return params[k].detach().cpu().numpy().copy()

    return GaussianScene(np_("centers"), np_("log_scales"), np_("rotations"), np_("opacity_logits"), np_("colors"), ids)


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def so3_exp_t(omega: torch.Tensor) -> torch.Tensor:
    """Differentiable Rodrigues map, smooth through zero."""
    theta2 = (omega * omega).sum()
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    A = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    B = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    zero = torch.zeros((), dtype=omega.dtype)
    K = torch.stack(
        [zero, -omega[2], omega[1], omega[2], zero, -omega[0], -omega[1], omega[0], zero]
    ).reshape(3, 3)
    return torch.eye(3, dtype=omega.dtype) + A * K + B * (K @ K)


def posed_extrinsics(camera: Camera, delta: Optional[torch.Tensor] = None):
    """World-to-camera (R, t) tensors after a left-multiplicative delta ``(omega, v)``."""
    R0 = as_tensor(camera.pose.R)
    t0 = as_tensor(camera.pose.translation)
    if delta is None:
        return R0, t0
    dR = so3_exp_t(delta[:3])
    return dR @ R0, dR @ t0 + delta[3:]


def apply_exposure_t(color: torch.Tensor, exposure: Optional[torch.Tensor]) -> torch.Tensor:
    """``a * I + b`` with ``exposure = (log a, b)``; unclamped."""
    if exposure is None:
        return color
    return torch.exp(exposure[0]) * color + exposure[1]


# ---------------------------------------------------------------------------
# rasterizer


def _project(params: dict, camera: Camera, R: torch.Tensor, t: torch.Tensor):
    """Screen-space means, 2D covariances (dilated) and camera depths of all Gaussians."""
    k = camera.intrinsics
    centers = params["centers"]
    n = centers.shape[0]
    xc = centers @ R.T + t
    x, y, z = xc.unbind(-1)
    front = (z > NEAR_PLANE).detach()
    zs = torch.where(front, z, torch.ones_like(z))

    Rg = quat_to_rotmat_t(params["rotations"])
    M = Rg * torch.exp(params["log_scales"])[:, None, :]
    cov3 = M @ M.transpose(1, 2)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [k.fx / zs, zero, -k.fx * x / zs**2, zero, k.fy / zs, -k.fy * y / zs**2], dim=-1
    ).reshape(n, 2, 3)
    JW = J @ R
    cov2 = JW @ cov3 @ JW.transpose(1, 2)
    a = cov2[:, 0, 0] + DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + DILATION
    u = k.fx * x / zs + k.cx
    v = k.fy * y / zs + k.cy
    return u, v, a, b, c, zs, front


def _draw_order(u, v, a, b, c, zs, front, ids, width, height) -> np.ndarray:
    """Indices of Gaussians whose truncated footprint touches a pixel center, front to back."""
    with torch.no_grad():
        det = a * c - b * b
        rx = TRUNCATION * torch.sqrt(a)
        ry = TRUNCATION * torch.sqrt(c)
        inside = (u + rx >= 0) & (u - rx <= width - 1) & (v + ry >= 0) & (v - ry <= height - 1)
        keep = (front & inside & (det > 0)).cpu().numpy()
        depth_np = zs.detach().cpu().numpy()
    ids = np.asarray(ids)
    sel = np.flatnonzero(keep)
    return sel[np.lexsort((ids[sel], depth_np[sel]))]


def _empty(height, width):
    zeros = torch.zeros((height, width), dtype=DTYPE)
    return torch.zeros((height, width, 3), dtype=DTYPE), zeros, zeros.clone()


def depth_validity(alpha: torch.Tensor) -> torch.Tensor:
    """Smoothstep from 0 at ALPHA_FLOOR to 1 at DEPTH_FULL_ALPHA.

    Depth is exactly the normalized expectation wherever alpha >= DEPTH_FULL_ALPHA and fades
    to 0 on sparsely covered pixels, keeping it differentiable across the floor.
    """
    s = torch.clamp((alpha - ALPHA_FLOOR) / (DEPTH_FULL_ALPHA - ALPHA_FLOOR), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _expected_depth(depth_num: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    valid = alpha >= ALPHA_FLOOR
    safe = torch.where(valid, alpha, torch.ones_like(alpha))
    return torch.where(valid, depth_validity(alpha) * depth_num / safe, torch.zeros_like(alpha))


def _footprint(maha: torch.Tensor) -> torch.Tensor:
    """exp(-m/2) minus its tangent at the cutoff, renormalized to 1 at the center.

    Value and slope both vanish at ``m = TRUNCATION**2``; the profile is convex so it stays
    non-negative inside the cutoff.
    """
    m_cut = TRUNCATION**2
    tangent = _CUT * (1.0 + 0.5 * (m_cut - maha))
    g = (torch.exp(-0.5 * maha) - tangent) / (1.0 - _CUT * (1.0 + 0.5 * m_cut))
    return torch.where(maha < m_cut, g, torch.zeros_like(g))


def rasterize(params: dict, ids, camera: Camera, R: torch.Tensor, t: torch.Tensor):
    """Composite the Gaussians in ``params`` seen through extrinsics ``(R, t)``.

    Only (Gaussian, pixel) pairs inside each footprint's bounding box are evaluated. Returns
    ``(color (H,W,3), depth (H,W), alpha (H,W))`` tensors.
    """
    H, W = camera.intrinsics.shape
    if params["centers"].shape[0] == 0:
        return _empty(H, W)
    u, v, a, b, c, zs, front = _project(params, camera, R, t)
    order = _draw_order(u, v, a, b, c, zs, front, ids, W, H)
    if order.size == 0:
        return _empty(H, W)

    # (gaussian, pixel) pairs; the ellipse maha <= T^2 spans exactly T*sqrt(cov_xx) along x
    with torch.no_grad():
        uo, vo = u[order].numpy(), v[order].numpy()
        ao, bo, co = a[order].numpy(), b[order].numpy(), c[order].numpy()
        rx = TRUNCATION * np.sqrt(ao)
        ry = TRUNCATION * np.sqrt(co)
    x0 = np.clip(np.ceil(uo - rx), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.floor(uo + rx), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(vo - ry), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.floor(vo + ry), 0, H - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    if counts.sum() == 0:
        return _empty(H, W)
    rank = np.repeat(np.arange(order.size), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    bw_r = bw[rank]
    px = x0[rank] + local % bw_r
    py = y0[rank] + local // bw_r
    # drop box corners outside the ellipse; the footprint is exactly zero there
    ddx, ddy = px - uo[rank], py - vo[rank]
    deto = ao * co - bo * bo
    m_np = (co[rank] * ddx * ddx - 2.0 * bo[rank] * ddx * ddy + ao[rank] * ddy * ddy) / deto[rank]
    inside = m_np < TRUNCATION**2 * (1.0 + 1e-9)
    if not inside.any():
        return _empty(H, W)
    rank, px, py = rank[inside], px[inside], py[inside]
    pix = py * W + px
    # pairs grouped by pixel; stable sort keeps front-to-back order within a pixel
    perm = np.argsort(pix, kind="stable")
    rank, pix, px, py = rank[perm], pix[perm], px[perm], py[perm]
    seg_start = np.zeros(pix.size, dtype=bool)
    seg_start[0] = True
    seg_start[1:] = pix[1:] != pix[:-1]
    first = np.maximum.accumulate(np.where(seg_start, np.arange(pix.size), 0))

    g_idx = torch.as_tensor(order[rank], dtype=torch.long)
    det = a * c - b * b
    ca, cb, cc = (c / det)[g_idx], (-b / det)[g_idx], (a / det)[g_idx]
    dx = torch.as_tensor(px, dtype=DTYPE) - u[g_idx]
    dy = torch.as_tensor(py, dtype=DTYPE) - v[g_idx]
    maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    alpha_p = torch.sigmoid(params["opacity_logits"])[g_idx] * _footprint(maha)
    alpha_p = torch.clamp(alpha_p, max=1.0 - 1e-12)

    log_keep = torch.log1p(-alpha_p)
    csum = torch.cumsum(log_keep, 0)
    first_t = torch.as_tensor(first, dtype=torch.long)
    log_trans = (csum - log_keep) - (csum[first_t] - log_keep[first_t])
    w = alpha_p * torch.exp(log_trans)

    pix_t = torch.as_tensor(pix, dtype=torch.long)
    color = torch.zeros((H * W, 3), dtype=DTYPE).index_add(0, pix_t, w[:, None] * params["colors"][g_idx])
    alpha = torch.zeros(H * W, dtype=DTYPE).index_add(0, pix_t, w)
    depth_num = torch.zeros(H * W, dtype=DTYPE).index_add(0, pix_t, w * zs[g_idx])
    depth = _expected_depth(depth_num, alpha)
    return color.reshape(H, W, 3), depth.reshape(H, W), alpha.reshape(H, W)


def rasterize_dense(params: dict, ids, camera: Camera, R: torch.Tensor, t: torch.Tensor):
    """Reference compositor evaluating every Gaussian at every pixel with an explicit cumprod."""
    H, W = camera.intrinsics.shape
    if params["centers"].shape[0] == 0:
        return _empty(H, W)
    u, v, a, b, c, zs, front = _project(params, camera, R, t)
    order = _draw_order(u, v, a, b, c, zs, front, ids, W, H)
    if order.size == 0:
        return _empty(H, W)
    idx = torch.as_tensor(order, dtype=torch.long)
    a, b, c, u, v, zsel = (q[idx] for q in (a, b, c, u, v, zs))
    det = a * c - b * b
    ca, cb, cc = c / det, -b / det, a / det
    py = torch.arange(H, dtype=DTYPE)[None, :, None]
    px = torch.arange(W, dtype=DTYPE)[None, None, :]
    dx = px - u[:, None, None]
    dy = py - v[:, None, None]
    maha = ca[:, None, None] * dx * dx + 2.0 * cb[:, None, None] * dx * dy + cc[:, None, None] * dy * dy
    alpha_i = torch.sigmoid(params["opacity_logits"][idx])[:, None, None] * _footprint(maha)
    trans = torch.cumprod(1.0 - alpha_i, dim=0)
    trans = torch.cat([torch.ones((1, H, W), dtype=DTYPE), trans[:-1]], dim=0)
    weights = alpha_i * trans
    color = torch.einsum("nhw,nc->hwc", weights, params["colors"][idx])
    alpha = weights.sum(0)
    depth_num = torch.einsum("nhw,n->hw", weights, zsel)
    depth = _expected_depth(depth_num, alpha)
    return color, depth, alpha


def render_tensors(params: dict, ids, camera: Camera, pose_delta=None, exposure=None):
    R, t = posed_extrinsics(camera, pose_delta)
    color, depth, alpha = rasterize(params, ids, camera, R, t)
    return apply_exposure_t(color, exposure), depth, alpha


def render(scene: GaussianScene, camera: Camera) -> RenderOutput:
    """Render color, expected depth and accumulated opacity of ``scene`` seen from ``camera``."""
    with torch.no_grad():
        color, depth, alpha = render_tensors(scene_tensors(scene), scene.ids, camera)
    return RenderOutput(color.numpy().clip(0.0, 1.0), depth.numpy(), alpha.numpy())


def render_with_gradients(
    scene: GaussianScene,
    camera: Camera,
    pixel_loss_gradient,
    depth_gradient=None,
    alpha_gradient=None,
    exposure=(1.0, 0.0),
) -> RenderGradients:
    """Back-propagate per-pixel loss gradients to every scene, pose and exposure parameter.

    ``pixel_loss_gradient`` is dL/d(color) with shape H x W x 3, taken on the exposure-corrected
    unclamped color. Pose gradients are w.r.t. a left-multiplicative delta at zero; exposure
    gradients are w.r.t. ``(log a, b)``.
    """
    params = scene_tensors(scene, requires_grad=True)
    delta = torch.zeros(6, dtype=DTYPE, requires_grad=True)
    expo = as_tensor([np.log(exposure[0]), exposure[1]], requires_grad=True)
    color, depth, alpha = render_tensors(params, scene.ids, camera, delta, expo)
    objective = (color * as_tensor(pixel_loss_gradient)).sum()
    if depth_gradient is not None:
        objective = objective + (depth * as_tensor(depth_gradient)).sum()
    if alpha_gradient is not None:
        objective = objective + (alpha * as_tensor(alpha_gradient)).sum()
    leaves = [params[k] for k in ("centers", "log_scales", "rotations", "opacity_logits", "colors")] + [delta, expo]
    if objective.requires_grad:
        grads = torch.autograd.grad(objective, leaves, allow_unused=True)
    else:
        grads = [None] * len(leaves)
    out = [np.zeros(tuple(leaf.shape)) if g is None else g.numpy() for g, leaf in zip(grads, leaves)]
    return RenderGradients(*out)
