"""Mutual-nearest-neighbor ZNCC patch matching and the three-level confidence mask."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree


class MatchingError(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    """Matches between a source image and a reference image; pixel coordinates are (x, y)."""

    src: np.ndarray  # (M, 2)
    ref: np.ndarray  # (M, 2)
    score: np.ndarray  # (M,) similarity in [-1, 1]
    source_id: str = "source"
    reference_id: str = "reference"

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.ref = np.asarray(self.ref, dtype=np.float64).reshape(-1, 2)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.ref) == len(self.score)):
            raise MatchingError("src, ref and score must have equal length")

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls, source_id="source", reference_id="reference") -> "CorrespondenceSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), source_id, reference_id)

    def reversed(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.ref, self.src, self.score, self.reference_id, self.source_id)

    def pairs(self) -> set:
        return {(tuple(s), tuple(r)) for s, r in zip(self.src.tolist(), self.ref.tolist())}


def _descriptors(img: np.ndarray, radius: int):
    """Zero-mean unit-norm patch vectors for every pixel whose patch fits in the image.

    Returns ``(desc (P, D), xs (P,), ys (P,), valid (P,))``; zero-variance patches are invalid
    and get a zero descriptor.
    """
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    k = 2 * radius + 1
    win = sliding_window_view(img, (k, k), axis=(0, 1))  # (H-k+1, W-k+1, C, k, k)
    hh, ww = win.shape[:2]
    desc = win.reshape(hh * ww, C * k * k).astype(np.float64)
    desc = desc - desc.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(desc, axis=1)
    valid = norm > 1e-9 * np.sqrt(desc.shape[1])
    desc[valid] /= norm[valid, None]
    desc[~valid] = 0.0
    ys, xs = np.mgrid[radius : radius + hh, radius : radius + ww]
    return desc, xs.ravel(), ys.ravel(), valid


def _grid_index(xs, ys, stride: int) -> np.ndarray:
    return np.flatnonzero((xs % stride == 0) & (ys % stride == 0))


def _best(rows, desc_rows, desc_all, xs_rows, ys_rows, xs_all, ys_all, max_disp):
    scores = desc_rows @ desc_all.T
    if max_disp is not None:
        far = (np.abs(xs_rows[:, None] - xs_all[None, :]) > max_disp) | (np.abs(ys_rows[:, None] - ys_all[None, :]) > max_disp)
        scores[far] = -np.inf
    idx = np.argmax(scores, axis=1)
    return idx, scores[np.arange(len(rows)), idx]


def _one_way(da, xa, ya, va, db, xb, yb, vb, stride, min_zncc, max_disp):
    """Mutual pairs (i_a, i_b, score) seeded from the keypoint grid of image a."""
    seeds = _grid_index(xa, ya, stride)
    seeds = seeds[va[seeds]]
    if seeds.size == 0:
        return []
    best_b, s = _best(seeds, da[seeds], db, xa[seeds], ya[seeds], xb, yb, max_disp)
    cand = np.unique(best_b)
    back, _ = _best(cand, db[cand], da, xb[cand], yb[cand], xa, ya, max_disp)
    back_of = dict(zip(cand.tolist(), back.tolist()))
    out = []
    for ia, ib, sc in zip(seeds.tolist(), best_b.tolist(), s.tolist()):
        if vb[ib] and sc >= min_zncc and back_of[ib] == ia:
            out.append((ia, ib, sc))
    return out


def match_patches(img_a, img_b, grid_stride: int = 4, patch_radius: int = 3, min_zncc: float = 0.8,
                  max_displacement: Optional[int] = None, source_id: str = "a", reference_id: str = "b") -> CorrespondenceSet:
    """Exhaustive ZNCC matching of grid keypoints, kept only when mutually best.

    Keypoints lie on a ``grid_stride`` lattice in both images; each is compared with every
    patch position of the other image. A pair survives when each side is the other's argmax
    and the ZNCC reaches ``min_zncc``. Seeding from both grids makes the result symmetric
    under swapping the inputs.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.ndim != b.ndim or (a.ndim == 3 and a.shape[2] != b.shape[2]):
        raise MatchingError("images must share a color space")
    if grid_stride < 1:
        raise MatchingError("grid_stride must be >= 1")
    k = 2 * patch_radius + 1
    for name, im in (("img_a", a), ("img_b", b)):
        if k > min(im.shape[:2]):
            raise MatchingError(f"patch_radius {patch_radius} too large for {name} of size {im.shape[:2]}")
    da, xa, ya, va = _descriptors(a, patch_radius)
    db, xb, yb, vb = _descriptors(b, patch_radius)

    found = {}
    for ia, ib, sc in _one_way(da, xa, ya, va, db, xb, yb, vb, grid_stride, min_zncc, max_displacement):
        found[(ia, ib)] = sc
    for ib, ia, sc in _one_way(db, xb, yb, vb, da, xa, ya, va, grid_stride, min_zncc, max_displacement):
        found.setdefault((ia, ib), sc)
    if not found:
        return CorrespondenceSet.empty(source_id, reference_id)
    keys = sorted(found, key=lambda p: (ya[p[0]], xa[p[0]]))
    ia = np.array([p[0] for p in keys])
    ib = np.array([p[1] for p in keys])
    return CorrespondenceSet(
        np.stack([xa[ia], ya[ia]], 1), np.stack([xb[ib], yb[ib]], 1),
        np.array([found[p] for p in keys]), source_id, reference_id,
    )


def support_map(matches: CorrespondenceSet, dims, support_radius: float = 8.0) -> np.ndarray:
    """Pixels within ``support_radius`` of any correspondence source pixel."""
    H, W = dims
    if len(matches) == 0:
        return np.zeros((H, W), bool)
    ys, xs = np.mgrid[0:H, 0:W]
    dist, _ = cKDTree(matches.src).query(np.stack([xs.ravel(), ys.ravel()], 1).astype(np.float64))
    return (dist <= support_radius).reshape(H, W)


def infer_mask(m_prev: CorrespondenceSet, m_next: CorrespondenceSet, dims, support_radius: float = 8.0) -> np.ndarray:
    """1.0 where supported by both sets, 0.5 by exactly one, 0.0 by neither."""
    in_prev = support_map(m_prev, dims, support_radius)
    in_next = support_map(m_next, dims, support_radius)
    return 0.5 * in_prev.astype(np.float64) + 0.5 * in_next.astype(np.float64)


def save_correspondences(matches: CorrespondenceSet, path) -> None:
    rows = np.column_stack([matches.src, matches.ref, matches.score]) if len(matches) else np.zeros((0, 5))
    with open(path, "w") as f:
        f.write("xs,ys,xr,yr,score\n")
        for r in rows:
            f.write(",".join(repr(float(v)) for v in r) + "\n")


def load_correspondences(path, source_id: str = "source", reference_id: str = "reference") -> CorrespondenceSet:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("xs"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise MatchingError(f"{path}:{lineno}: expected 5 fields xs,ys,xr,yr,score, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        return CorrespondenceSet.empty(source_id, reference_id)
    arr = np.array(rows)
    return CorrespondenceSet(arr[:, :2], arr[:, 2:4], arr[:, 4], source_id, reference_id)
