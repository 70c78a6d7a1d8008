"""Gaussian scene container and 3DGS-compatible binary PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import normalize_quaternion, quat_to_rotmat

SH_C0 = 0.28209479177

_FLOAT_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"] + [f"scale_{i}" for i in range(3)] + [
    f"rot_{i}" for i in range(4)
]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class Gaussian:
    center: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotation)
        return R @ np.diag(np.exp(2.0 * np.asarray(self.log_scales))) @ R.T


class GaussianScene:
    """Struct-of-arrays collection of Gaussians with stable integer ids.

    Arrays: ``ids (N,)``, ``centers (N,3)``, ``log_scales (N,3)``, ``rotations (N,4)`` as wxyz,
    ``opacity_logits (N,)`` and ``colors (N,3)`` in [0, 1].
    """

    def __init__(self, centers, log_scales, rotations, opacity_logits, colors, ids=None):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64).reshape(n)
        if len(np.unique(self.ids)) != n:
            raise ValueError("Gaussian ids must be unique")

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians, ids=None) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            [g.center for g in gaussians],
            [g.log_scales for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color for g in gaussians],
            ids,
        )

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(
            self.centers[i].copy(), self.log_scales[i].copy(), self.rotations[i].copy(),
            float(self.opacity_logits[i]), self.colors[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def copy(self) -> "GaussianScene":
        return self.subset(np.arange(len(self)))

    def subset(self, index) -> "GaussianScene":
        index = np.asarray(index)
        return GaussianScene(
            self.centers[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.colors[index], self.ids[index],
        )

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.ids, other.ids]),
        )

    def index_of(self, ids) -> np.ndarray:
        lookup = {int(g): i for i, g in enumerate(self.ids)}
        return np.array([lookup[int(g)] for g in np.atleast_1d(ids)], dtype=np.int64)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotations) if len(self) else np.zeros((0, 3, 3))
        S2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def normalized(self) -> "GaussianScene":
        """Copy with unit quaternions and colors clipped to [0, 1]."""
        out = self.copy()
        if len(out):
            out.rotations = normalize_quaternion(out.rotations)
        out.colors = np.clip(out.colors, 0.0, 1.0)
        return out

    def max_abs_difference(self, other: "GaussianScene") -> float:
        if len(self) != len(other):
            return float("inf")
        if len(self) == 0:
            return 0.0
        return max(
            float(np.max(np.abs(a - b)))
            for a, b in [
                (self.centers, other.centers), (self.log_scales, other.log_scales),
                (self.rotations, other.rotations), (self.opacity_logits, other.opacity_logits),
                (self.colors, other.colors), (self.ids, other.ids),
            ]
        )


# ---------------------------------------------------------------------------
# PLY


class PlyError(ValueError):
    """Base class for PLY parse failures; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PlyHeaderError(PlyError):
    pass


class PlyPropertyError(PlyError):
    pass


class PlyCountError(PlyError):
    def __init__(self, message: str, offset: int, expected: int, actual: int):
        super().__init__(message, offset)
        self.expected = expected
        self.actual = actual


def save_ply(scene: GaussianScene, path) -> None:
    n = len(scene)
    dtype = [(name, "<f4") for name in _FLOAT_FIELDS] + [("id", "<i4")]
    data = np.zeros(n, dtype=dtype)
    data["x"], data["y"], data["z"] = scene.centers.T if n else ([], [], [])
    for i in range(3):
        data[f"f_dc_{i}"] = (scene.colors[:, i] - 0.5) / SH_C0
        data[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    data["opacity"] = scene.opacity_logits
    data["id"] = scene.ids
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _FLOAT_FIELDS]
    header += ["property int id", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic", 0)
    if end < 0:
        raise PlyHeaderError("missing end_header", len(raw))
    body_start = raw.index(b"\n", end) + 1 if b"\n" in raw[end:] else len(raw)
    elements = []
    fmt = None
    offset = 0
    for line in raw[:end].split(b"\n"):
        line_offset = offset
        offset += len(line) + 1
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise PlyHeaderError(f"malformed format line {line!r}", line_offset)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyHeaderError(f"malformed element line {line!r}", line_offset)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element", line_offset)
            if tokens[1] == "list":
                raise PlyHeaderError("list properties are not supported", line_offset)
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise PlyHeaderError(f"malformed property line {line!r}", line_offset)
            elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise PlyHeaderError(f"unexpected header keyword {tokens[0]!r}", line_offset)
    if fmt != "binary_little_endian":
        raise PlyHeaderError(f"unsupported PLY format {fmt!r}; expected binary_little_endian", 0)
    return elements, body_start


def load_ply(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    elements, offset = _parse_header(raw)
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        nbytes = dtype.itemsize * count
        if name == "vertex":
            available = len(raw) - offset
            if available < nbytes:
                actual = available // dtype.itemsize if dtype.itemsize else 0
                raise PlyCountError(
                    f"truncated body: expected {count} vertex elements, found {actual}",
                    len(raw), count, actual,
                )
            vertex = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            vertex_offset = offset
            break
        offset += nbytes
    if vertex is None:
        raise PlyHeaderError("no vertex element", 0)
    names = vertex.dtype.names or ()
    missing = [p for p in _REQUIRED if p not in names]
    if missing:
        raise PlyPropertyError(f"missing vertex properties {missing}", vertex_offset)

    def col(name):
        return vertex[name].astype(np.float64)

    centers = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = np.stack([col(f"f_dc_{i}") * SH_C0 + 0.5 for i in range(3)], axis=1)
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    ids = vertex["id"].astype(np.int64) if "id" in names else None
    return GaussianScene(centers, log_scales, rotations, col("opacity"), colors, ids)
