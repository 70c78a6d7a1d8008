"""Deterministic synthetic scenes: a textured ground plane with boxes and spheres, an arc of
cameras looking at it, optional labeled floaters, and frame corruptions that mimic defective
pseudo views."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Camera, Intrinsics, RigidPose, rotmat_to_quat
from .render import RenderOutput, render
from .scene import GaussianScene, logit


@dataclass(frozen=True)
class Box:
    center: tuple[float, float]  # footprint center on the ground (x, y)
    size: tuple[float, float, float]  # extent along x, y, z; the box rests on z = 0


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class SyntheticSceneSpec:
    rng_seed: int = 7
    gaussian_count: int = 500
    ground: tuple[float, float, float, float] = (-3.5, 3.5, -1.0, 7.0)  # x0, x1, y0, y1 at z = 0
    boxes: tuple[Box, ...] = (Box((-0.9, 1.6), (0.9, 0.9, 0.8)), Box((1.0, 2.8), (0.8, 1.0, 1.2)))
    spheres: tuple[Sphere, ...] = (Sphere((0.2, 0.6, 0.45), 0.45),)
    camera_count: int = 12
    arc_radius: float = 4.0
    arc_height: float = 3.0
    arc_span_deg: float = 50.0
    look_at: tuple[float, float, float] = (0.0, 1.4, 0.0)
    image_size: tuple[int, int] = (80, 60)  # width, height
    focal: float = 90.0
    footprint_scale: float = 0.5  # tangent std as a fraction of surface point spacing
    opacity: float = 0.92
    texture_wavelength: tuple[float, float] = (0.2, 0.6)
    color_jitter: float = 0.3
    floater_count: int = 0
    floater_offset: float = 0.5  # minimum distance from any surface, meters
    floater_depth_fraction: tuple[float, float] = (0.25, 0.55)
    floater_scale: float = 0.06
    floater_clump: int = 1  # floaters per clump
    floater_clump_radius: float = 0.15


@dataclass
class SyntheticScene:
    scene: GaussianScene  # surface Gaussians followed by floaters
    cameras: list[Camera]
    renders: list[RenderOutput]  # of the floater-free surface
    floater_mask: np.ndarray  # bool per Gaussian, aligned with scene order
    spec: SyntheticSceneSpec = field(repr=False, default=None)

    @property
    def surface_scene(self) -> GaussianScene:
        return self.scene.subset(np.flatnonzero(~self.floater_mask))

    @property
    def floater_ids(self) -> np.ndarray:
        return self.scene.ids[self.floater_mask]


# ---------------------------------------------------------------------------
# cameras


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose for a camera at ``position`` looking at ``target`` (x right, y down)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return RigidPose.from_matrix(R, -R @ position)


def camera_arc(spec: SyntheticSceneSpec) -> list[Camera]:
    if spec.arc_radius <= 0:
        raise ValueError("camera arc radius must be positive")
    if spec.camera_count < 2:
        raise ValueError("need at least two cameras")
    w, h = spec.image_size
    intr = Intrinsics(spec.focal, spec.focal, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    target = np.asarray(spec.look_at)
    angles = np.deg2rad(np.linspace(-spec.arc_span_deg / 2, spec.arc_span_deg / 2, spec.camera_count))
    cams = []
    for i, a in enumerate(angles):
        pos = np.array([target[0] + spec.arc_radius * np.sin(a), target[1] - spec.arc_radius * np.cos(a), spec.arc_height])
        cams.append(Camera(intr, look_at(pos, target), i))
    return cams


# ---------------------------------------------------------------------------
# surfaces


def _rect_samples(rng, n, u_range, v_range, exclude=None):
    """``n`` jittered-grid samples in a rectangle, as (u, v) arrays."""
    (u0, u1), (v0, v1) = u_range, v_range
    w, h = u1 - u0, v1 - v0
    nu = max(1, int(np.ceil(np.sqrt(n * w / h))))
    nv = max(1, int(np.ceil(n / nu)))
    while True:
        gu, gv = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="xy")
        cu, cv = u0 + gu.ravel() * w, v0 + gv.ravel() * h
        ok = np.ones(cu.shape, bool) if exclude is None else ~exclude(cu, cv)
        if ok.sum() >= n:
            break
        nu, nv = nu + 1, nv + 1
    idx = np.sort(rng.choice(np.flatnonzero(ok), size=n, replace=False))
    ju = rng.uniform(-0.3, 0.3, n) * w / nu
    jv = rng.uniform(-0.3, 0.3, n) * h / nv
    return cu[idx] + ju, cv[idx] + jv


def _frame_from_normal(normal) -> np.ndarray:
    """Rotation whose third column is ``normal``."""
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(helper, n)
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    return np.stack([a, b, n], axis=1)


def _box_faces(box: Box):
    """(origin, u_axis, v_axis, normal) for the five exposed faces of a box."""
    cx, cy = box.center
    sx, sy, sz = box.size
    x0, x1, y0, y1 = cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2
    ex, ey, ez = np.eye(3)
    return [
        (np.array([x0, y0, sz]), ex * sx, ey * sy, ez),  # top
        (np.array([x0, y0, 0.0]), ex * sx, ez * sz, -ey),  # front (-y)
        (np.array([x0, y1, 0.0]), ex * sx, ez * sz, ey),
        (np.array([x0, y0, 0.0]), ey * sy, ez * sz, -ex),
        (np.array([x1, y0, 0.0]), ey * sy, ez * sz, ex),
    ]


def surface_distance(spec: SyntheticSceneSpec, points) -> np.ndarray:
    """Unsigned distance from each point to the nearest modeled surface."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    gx0, gx1, gy0, gy1 = spec.ground
    dx = np.maximum(np.maximum(gx0 - p[:, 0], p[:, 0] - gx1), 0.0)
    dy = np.maximum(np.maximum(gy0 - p[:, 1], p[:, 1] - gy1), 0.0)
    best = np.sqrt(dx**2 + dy**2 + p[:, 2] ** 2)
    for box in spec.boxes:
        cx, cy = box.center
        half = np.array(box.size) / 2
        q = np.abs(p - np.array([cx, cy, half[2]])) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        best = np.minimum(best, np.abs(outside + inside))
    for s in spec.spheres:
        best = np.minimum(best, np.abs(np.linalg.norm(p - np.array(s.center), axis=1) - s.radius))
    return best


def _texture(rng, spec: SyntheticSceneSpec):
    lo, hi = spec.texture_wavelength
    dirs = rng.normal(size=(3, 4, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    freq = 2 * np.pi / rng.uniform(lo, hi, size=(3, 4))
    phase = rng.uniform(0, 2 * np.pi, size=(3, 4))
    amp = rng.uniform(0.08, 0.16, size=(3, 4))
    base = rng.uniform(0.35, 0.65, size=3)

    def color(points):
        arg = np.einsum("ckd,nd->nck", dirs * freq[..., None], points) + phase
        return np.clip(base + (amp * np.sin(arg)).sum(-1), 0.03, 0.97)

    return color


def _surface_points(rng, spec: SyntheticSceneSpec):
    """Centers, normals and per-point spacing for ``gaussian_count`` surface samples."""
    gx0, gx1, gy0, gy1 = spec.ground
    patches = []  # (kind, payload, area)

    def under_box(x, y):
        hit = np.zeros(x.shape, bool)
        for b in spec.boxes:
            hit |= (np.abs(x - b.center[0]) < b.size[0] / 2) & (np.abs(y - b.center[1]) < b.size[1] / 2)
        return hit

    box_area = sum(b.size[0] * b.size[1] for b in spec.boxes)
    patches.append(("ground", None, (gx1 - gx0) * (gy1 - gy0) - box_area))
    for b in spec.boxes:
        for face in _box_faces(b):
            patches.append(("face", face, np.linalg.norm(face[1]) * np.linalg.norm(face[2])))
    for s in spec.spheres:
        patches.append(("sphere", s, 4 * np.pi * s.radius**2))

    areas = np.array([p[2] for p in patches])
    raw = spec.gaussian_count * areas / areas.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: spec.gaussian_count - counts.sum()]:
        counts[i] += 1

    centers, normals, spacing = [], [], []
    for (kind, payload, area), n in zip(patches, counts):
        if n == 0:
            continue
        if kind == "ground":
            x, y = _rect_samples(rng, n, (gx0, gx1), (gy0, gy1), exclude=under_box)
            pts = np.stack([x, y, np.zeros(n)], axis=1)
            nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
        elif kind == "face":
            origin, eu, ev, nv = payload
            a, b = _rect_samples(rng, n, (0.0, 1.0), (0.0, 1.0))
            pts = origin + a[:, None] * eu + b[:, None] * ev
            nrm = np.tile(nv, (n, 1))
        else:
            k = np.arange(n) + 0.5
            phi = np.arccos(1 - 2 * k / n)
            theta = np.pi * (1 + 5**0.5) * k + rng.uniform(0, 2 * np.pi)
            nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
            pts = np.asarray(payload.center) + payload.radius * nrm
        centers.append(pts)
        normals.append(nrm)
        spacing.append(np.full(n, np.sqrt(area / n)))
    return np.concatenate(centers), np.concatenate(normals), np.concatenate(spacing)


def generate_synthetic(spec: SyntheticSceneSpec = SyntheticSceneSpec(), with_renders: bool = True) -> SyntheticScene:
    """Build the scene, the camera arc and floater-free ground-truth renders. Pure in ``spec``."""
    if spec.gaussian_count < 1:
        raise ValueError("gaussian_count must be >= 1")
    cameras = camera_arc(spec)
    rng = np.random.default_rng(spec.rng_seed)
    color_fn = _texture(rng, spec)
    centers, normals, spacing = _surface_points(rng, spec)
    n = len(centers)
    rotations = np.array([rotmat_to_quat(_frame_from_normal(nv)) for nv in normals])
    tangent = np.log(spec.footprint_scale * spacing)
    log_scales = np.stack([tangent, tangent, np.log(0.15 * spec.footprint_scale * spacing)], axis=1)
    colors = np.clip(color_fn(centers) + rng.uniform(-spec.color_jitter, spec.color_jitter, (n, 3)), 0.0, 1.0)
    opacity = np.full(n, float(logit(spec.opacity)))
    surface = GaussianScene(centers, log_scales, rotations, opacity, colors)

    floaters = _floaters(rng, spec, cameras, centers, start_id=n)
    scene = surface.concat(floaters)
    mask = np.zeros(len(scene), bool)
    mask[n:] = True
    renders = [render(surface, cam) for cam in cameras] if with_renders else []
    return SyntheticScene(scene, cameras, renders, mask, spec)


def _floaters(rng, spec, cameras, surface_centers, start_id) -> GaussianScene:
    count = spec.floater_count
    if count == 0:
        return GaussianScene.empty()
    lo, hi = spec.floater_depth_fraction
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 1000 * count:
            raise RuntimeError("could not place floaters at the requested surface offset")
        cam = cameras[rng.integers(len(cameras))]
        target = surface_centers[rng.integers(len(surface_centers))]
        origin = cam.pose.center
        seed_point = origin + rng.uniform(lo, hi) * (target - origin)
        members = min(spec.floater_clump, count - len(out))
        offsets = rng.normal(size=(members, 3))
        offsets *= spec.floater_clump_radius * rng.uniform(0, 1, (members, 1)) / np.linalg.norm(offsets, axis=1, keepdims=True)
        if members == 1:
            offsets[:] = 0.0
        p = seed_point + offsets
        if np.all(p[:, 2] > 0.05) and np.all(surface_distance(spec, p) >= spec.floater_offset):
            out.extend(p)
    centers = np.array(out)
    log_scales = np.log(spec.floater_scale * rng.uniform(0.8, 1.25, (count, 3)))
    rotations = rng.normal(size=(count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    colors = rng.uniform(0.0, 1.0, (count, 3))
    opacity = np.full(count, float(logit(spec.opacity)))
    return GaussianScene(centers, log_scales, rotations, opacity, colors, np.arange(start_id, start_id + count))


# ---------------------------------------------------------------------------
# corruptions

CORRUPTION_MODES = ("gaussian-blur", "hole-mask", "color-shift", "ghost-overlay")


def corruption_stencil(shape: Sequence[int], mode: str, seed: int, ratio: float = 0.2, block: int = 4,
                       patches: int = 1, patch_size: float = 0.35, margin: int = 0, **_) -> np.ndarray:
    """Boolean H x W map of the pixels ``corrupt_frame`` alters for the given parameters."""
    H, W = shape[:2]
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    rng = np.random.default_rng(seed)
    stencil = np.zeros((H, W), bool)
    if mode == "hole-mask":
        by, bx = -(-H // block), -(-W // block)
        n_cells = by * bx
        chosen = rng.choice(n_cells, size=int(round(ratio * n_cells)), replace=False)
        cells = np.zeros(n_cells, bool)
        cells[chosen] = True
        stencil = np.kron(cells.reshape(by, bx), np.ones((block, block), bool))[:H, :W]
    elif mode == "ghost-overlay":
        ph, pw = max(1, int(round(patch_size * H))), max(1, int(round(patch_size * W)))
        for _ in range(patches):
            y0 = rng.integers(margin, max(margin, H - ph - margin) + 1)
            x0 = rng.integers(margin, max(margin, W - pw - margin) + 1)
            stencil[y0 : y0 + ph, x0 : x0 + pw] = True
    else:
        stencil[:] = True
    return stencil


def corrupt_frame(image, mode: str, seed: int, sigma: float = 1.5, ratio: float = 0.2, block: int = 4,
                  delta=0.1, patches: int = 1, patch_size: float = 0.35, ghost_alpha: float = 0.6,
                  fill: float = 0.0, margin: int = 0) -> np.ndarray:
    """Deterministically degrade ``image`` (H x W x 3 in [0, 1]); the result has the same shape.

    Modes: ``gaussian-blur`` (sigma px), ``hole-mask`` (``ratio`` of ``block``-px cells set to
    ``fill``), ``color-shift`` (add ``delta``), ``ghost-overlay`` (rectangular patches blended
    with a point-mirrored, channel-rotated copy of the frame: plausible texture that exists
    nowhere in the scene; patches keep ``margin`` px away from the border).
    """
    img = np.asarray(image, dtype=np.float64)
    stencil = corruption_stencil(img.shape, mode, seed, ratio=ratio, block=block, patches=patches, patch_size=patch_size,
                                margin=margin)
    if mode == "gaussian-blur":
        return gaussian_filter(img, sigma=(sigma, sigma, 0)[: img.ndim], mode="nearest")
    if mode == "color-shift":
        return np.clip(img + np.asarray(delta, dtype=np.float64), 0.0, 1.0)
    out = img.copy()
    if mode == "hole-mask":
        out[stencil] = fill
        return out
    ghost = img[::-1, ::-1]
    if ghost.ndim == 3:
        ghost = np.roll(ghost, 1, axis=2)
    out[stencil] = (1.0 - ghost_alpha) * img[stencil] + ghost_alpha * ghost[stencil]
    return out
