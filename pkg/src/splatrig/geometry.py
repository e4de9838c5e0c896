"""Triangle meshes, per-face local frames and polar coordinates of local means.

Quaternions are stored as ``(w, x, y, z)`` throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFace, NearSingular, ValidationError

DIFFERENTIABLE = ("polar",)

AREA_EPS = 1e-12
POLAR_EPS = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    part_of_face: np.ndarray  # (F,) int64, ids 0..n-1
    part_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.part_of_face = np.asarray(self.part_of_face, dtype=np.int64).reshape(-1)
        if not self.part_names:
            n = int(self.part_of_face.max()) + 1 if len(self.part_of_face) else 0
            self.part_names = [f"part{k}" for k in range(n)]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    def faces_of_part(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.part_of_face == k)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology and parts, new vertex positions."""
        return TriMesh(vertices, self.faces, self.part_of_face, list(self.part_names))

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def validate(self, check_area: bool = True) -> None:
        if len(self.part_of_face) != self.n_faces:
            raise ValidationError("part_of_face must have one entry per face")
        if self.n_faces and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise ValidationError("face references a vertex index out of range")
        used = np.unique(self.part_of_face)
        if self.n_faces and not np.array_equal(used, np.arange(self.n_parts)):
            raise ValidationError(
                f"part ids must be contiguous 0..{self.n_parts - 1} and each part non-empty, got {used.tolist()}"
            )
        if check_area:
            bad = np.flatnonzero(self.face_areas() <= AREA_EPS)
            if len(bad):
                raise DegenerateFace(f"degenerate faces: {bad[:10].tolist()}")


@dataclass(frozen=True)
class FaceFrame:
    rotation: np.ndarray  # (3, 3), columns = tangent, bitangent, normal
    center: np.ndarray  # (3,)
    scale: float


def face_frames(vertices: np.ndarray, faces: np.ndarray, check: bool = True):
    """Vectorised face frames.

    Returns ``(R, C, S)`` with shapes ``(F, 3, 3)``, ``(F, 3)`` and ``(F,)``.
    The local z axis is the unit face normal, x follows the first edge.
    """
    v = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    v0, v1, v2 = v[:, 0], v[:, 1], v[:, 2]
    e01 = v1 - v0
    e02 = v2 - v0
    cross = np.cross(e01, e02)
    twice_area = np.linalg.norm(cross, axis=1)
    if check and np.any(0.5 * twice_area <= AREA_EPS):
        bad = np.flatnonzero(0.5 * twice_area <= AREA_EPS)
        raise DegenerateFace(f"degenerate faces: {bad[:10].tolist()}")
    normal = cross / twice_area[:, None]
    tangent = e01 / np.linalg.norm(e01, axis=1)[:, None]
    bitangent = np.cross(normal, tangent)
    bitangent /= np.linalg.norm(bitangent, axis=1)[:, None]
    R = np.stack([tangent, bitangent, normal], axis=2)
    C = (v0 + v1 + v2) / 3.0
    S = (np.linalg.norm(e01, axis=1) + np.linalg.norm(v2 - v1, axis=1) + np.linalg.norm(e02, axis=1)) / 3.0
    return R, C, S


def compute_face_frame(mesh: TriMesh, face_index: int) -> FaceFrame:
    R, C, S = face_frames(mesh.vertices, mesh.faces[face_index : face_index + 1])
    return FaceFrame(R[0], C[0], float(S[0]))


@dataclass(frozen=True)
class PolarMean:
    r: float
    theta: float
    phi: float


def to_polar(mu) -> PolarMean:
    x, y, z = (float(c) for c in mu)
    r = float(np.sqrt(x * x + y * y + z * z))
    if r < POLAR_EPS:
        return PolarMean(0.0, 0.0, 0.0)
    theta = float(np.arccos(np.clip(x / r, -1.0, 1.0)))
    phi = float(np.arccos(np.clip(z / r, -1.0, 1.0)))
    return PolarMean(r, theta, phi)


def polar_batch(mu: np.ndarray):
    """``(r, phi)`` for an ``(N, 3)`` array; zero vectors map to ``(0, 0)``."""
    mu = np.asarray(mu, dtype=np.float64)
    r = np.linalg.norm(mu, axis=-1)
    safe = np.where(r < POLAR_EPS, 1.0, r)
    phi = np.where(r < POLAR_EPS, 0.0, np.arccos(np.clip(mu[..., 2] / safe, -1.0, 1.0)))
    return r, phi


def polar_gradients(mu):
    """Gradients of ``r`` and ``phi`` with respect to the cartesian mean.

    Raises NearSingular at the origin and at the poles of ``phi``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    r = float(np.linalg.norm(mu))
    if r <= 1e-8:
        raise NearSingular("polar gradients undefined at the origin")
    u = mu[2] / r
    if abs(u) >= 1.0 - 1e-8:
        raise NearSingular("phi gradient undefined on the local z axis")
    dr = mu / r
    du = np.array([0.0, 0.0, 1.0]) / r - mu[2] * mu / r**3
    dphi = -du / np.sqrt(1.0 - u * u)
    return dr, dphi


def polar_gradients_batch(mu: np.ndarray):
    """Vectorised ``polar_gradients``; singular rows come back as zeros with a mask.

    Returns ``(dr, dphi, r_ok, phi_ok)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    r = np.linalg.norm(mu, axis=1)
    r_ok = r > 1e-8
    safe = np.where(r_ok, r, 1.0)
    u = mu[:, 2] / safe
    phi_ok = r_ok & (np.abs(u) < 1.0 - 1e-8)
    dr = np.where(r_ok[:, None], mu / safe[:, None], 0.0)
    ez = np.zeros_like(mu)
    ez[:, 2] = 1.0
    du = ez / safe[:, None] - (mu[:, 2] / safe**3)[:, None] * mu
    denom = np.sqrt(np.where(phi_ok, 1.0 - u * u, 1.0))
    dphi = np.where(phi_ok[:, None], -du / denom[:, None], 0.0)
    return dr, dphi, r_ok, phi_ok


# --- rotations -------------------------------------------------------------


def axis_angle_to_matrix(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-15:
        return np.eye(3)
    k = v / angle
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for ``(..., 4)`` unit quaternions."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back through ``quat_to_matrix`` (formula as written, no normalisation)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
        + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternions (w >= 0) for ``(..., 3, 3)`` rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    cands = np.stack(
        [
            np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
            np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + m00 - m11 - m22, m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
            np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0], 1 + m11 - m00 - m22, m[:, 1, 2] + m[:, 2, 1]], -1),
            np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1], 1 + m22 - m00 - m11], -1),
        ],
        axis=1,
    )
    # pick the branch with the largest diagonal term for stability
    pick = np.argmax(np.stack([tr, m00, m11, m22], -1), axis=1)
    q = cands[np.arange(len(m)), pick]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(R.shape[:-2] + (4,))


def quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """``L(p)`` such that ``p ⊗ q = L(p) @ q`` for ``(..., 4)`` inputs."""
    w, x, y, z = np.moveaxis(np.asarray(p, dtype=np.float64), -1, 0)
    L = np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, -z, y], -1),
            np.stack([y, z, w, -x], -1),
            np.stack([z, -y, x, w], -1),
        ],
        axis=-2,
    )
    return L


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_left_matrix(p), q)
