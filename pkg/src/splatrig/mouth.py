"""Mouth interior construction and part-wise offsets.

The lip ring is resampled to a 15-point teeth trajectory on a horizontal
(xz) plane. Treating it as a circular arc, its pseudo-centre is the crossing
of the perpendicular bisectors of the two end segments; the arc is then
extended past both ends by mirroring the five points next to each end across
the line from the centre to that end point. A copy of the extended
trajectory pushed back towards the centre closes a strip of teeth quads, and
a fan over the pushed row forms the palate (upper) or mouth floor (lower).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAxis, DegenerateFace, ParallelBisectors, ValidationError
from .geometry import AREA_EPS, TriMesh

N_TRAJ = 15
N_REFLECT = 5


class MouthPart(enum.IntEnum):
    UPPER = 0
    LOWER = 1


@dataclass
class TeethTrajectory:
    points: np.ndarray  # (15, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != N_TRAJ:
            raise ValidationError(f"teeth trajectory needs {N_TRAJ} points, got {len(self.points)}")
        if np.ptp(self.points[:, 1]) > 1e-9:
            raise ValidationError("trajectory points must share one y value")
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(steps <= 1e-12):
            raise ValidationError("consecutive trajectory points must be distinct")

    @property
    def xz(self) -> np.ndarray:
        return self.points[:, [0, 2]]


@dataclass
class MouthAugmentation:
    new_vertices: np.ndarray  # (Vn, 3)
    new_faces: np.ndarray  # (Fn, 3), indices into the augmented mesh
    part_label: np.ndarray  # (Fn,) MouthPart values
    upper_vertex_ids: np.ndarray
    lower_vertex_ids: np.ndarray
    base_vertex_count: int
    base_face_count: int
    centers: np.ndarray  # (2, 2) pseudo-centres (x, z) of the upper and lower rings

    @property
    def new_face_ids(self) -> np.ndarray:
        return self.base_face_count + np.arange(len(self.new_faces))


def pseudo_center(traj: TeethTrajectory) -> np.ndarray:
    """Intersection ``(x, z)`` of the bisectors of ``v0v1`` and ``v13v14``."""
    p = traj.xz
    d1 = p[1] - p[0]
    d2 = p[14] - p[13]
    m1 = 0.5 * (p[0] + p[1])
    m2 = 0.5 * (p[13] + p[14])
    sin = (d1[0] * d2[1] - d1[1] * d2[0]) / (np.linalg.norm(d1) * np.linalg.norm(d2))
    if abs(sin) <= 1e-6:
        raise ParallelBisectors("end segments are parallel; trajectory is too straight for a pseudo-centre")
    # each bisector is {c : (c - m) . d = 0}
    A = np.stack([d1, d2])
    b = np.array([d1 @ m1, d2 @ m2])
    return np.linalg.solve(A, b)


def reflect_across(points: np.ndarray, c: np.ndarray, through: np.ndarray) -> np.ndarray:
    """Mirror xz coordinates of ``points`` across the line through ``c`` and ``through``; y kept."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    axis = np.asarray(through, dtype=np.float64) - c
    length = np.linalg.norm(axis)
    if length <= 1e-12:
        raise DegenerateAxis("reflection axis has zero length")
    u = axis / length
    rel = points[:, [0, 2]] - c
    mirrored = c + 2.0 * (rel @ u)[:, None] * u - rel
    out = points.copy()
    out[:, 0] = mirrored[:, 0]
    out[:, 2] = mirrored[:, 1]
    return out


def extend_trajectory(traj: TeethTrajectory, c) -> np.ndarray:
    """Full 25-point trajectory ``L5..L1, v0..v14, R1..R5``.

    ``L_i`` mirrors ``v_i`` across the line ``C v0``; ``R_i`` mirrors
    ``v_{14-i}`` across ``C v14``.
    """
    c = np.asarray(c, dtype=np.float64)
    pts = traj.points
    left = reflect_across(pts[1 : N_REFLECT + 1], c, pts[0, [0, 2]])  # L1..L5
    right = reflect_across(pts[N_TRAJ - 1 - N_REFLECT : N_TRAJ - 1][::-1], c, pts[-1, [0, 2]])  # R1..R5
    return np.concatenate([left[::-1], pts, right])


def resample_ring(points: np.ndarray, n: int = N_TRAJ) -> np.ndarray:
    """Uniform arc-length resampling of an ordered polyline, flattened to its mean y."""
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n)
    out = np.stack([np.interp(targets, s, points[:, k]) for k in range(3)], axis=1)
    out[:, 1] = points[:, 1].mean()
    return out


def strip_faces(row0: np.ndarray, row1: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate the quads between two equal-length index rows, alternating the diagonal."""
    faces = []
    for i in range(len(row0) - 1):
        a, b, c, d = row0[i], row0[i + 1], row1[i + 1], row1[i]
        if i % 2 == 0:
            faces += [(a, b, c), (a, c, d)]
        else:
            faces += [(a, b, d), (b, c, d)]
    return faces


def fan_faces(apex: int, row: np.ndarray) -> list[tuple[int, int, int]]:
    return [(apex, row[i + 1], row[i]) for i in range(len(row) - 1)]


def expected_face_count(n_points: int = N_TRAJ + 2 * N_REFLECT) -> int:
    quads = n_points - 1
    return 2 * quads * 2 + 2 * quads


def _ring_structure(ring_points: np.ndarray, depth: float):
    traj = TeethTrajectory(resample_ring(ring_points))
    c = pseudo_center(traj)
    full = extend_trajectory(traj, c)
    mid = traj.xz.mean(axis=0)
    back = c - mid
    norm = np.linalg.norm(back)
    if norm <= 1e-12:
        raise DegenerateAxis("pseudo-centre coincides with the trajectory midpoint")
    shift = np.array([back[0], 0.0, back[1]]) / norm * depth
    shifted = full + shift
    apex = shifted.mean(axis=0)
    return full, shifted, apex, c


def build_mouth_structure(mesh: TriMesh, upper_ring, lower_ring, depth: float = 0.02) -> MouthAugmentation:
    if depth <= 0:
        raise ValidationError("depth must be positive")
    V0, F0 = mesh.n_vertices, mesh.n_faces
    verts = []
    faces = []
    labels = []
    ids = {}
    centers = []
    next_id = V0
    for part, ring in ((MouthPart.UPPER, upper_ring), (MouthPart.LOWER, lower_ring)):
        ring = np.asarray(ring, dtype=np.int64)
        if len(ring) < N_TRAJ:
            raise ValidationError(f"lip ring needs at least {N_TRAJ} vertices, got {len(ring)}")
        full, shifted, apex, c = _ring_structure(mesh.vertices[ring], depth)
        n = len(full)
        row0 = next_id + np.arange(n)
        row1 = next_id + n + np.arange(n)
        apex_id = next_id + 2 * n
        verts += [full, shifted, apex[None, :]]
        fs = strip_faces(row0, row1) + fan_faces(apex_id, row1)
        faces += fs
        labels += [part] * len(fs)
        ids[part] = np.arange(next_id, apex_id + 1)
        centers.append(c)
        next_id = apex_id + 1
    new_vertices = np.concatenate(verts)
    new_faces = np.asarray(faces, dtype=np.int64)
    all_v = np.concatenate([mesh.vertices, new_vertices])
    tri = all_v[new_faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if np.any(area <= AREA_EPS):
        raise DegenerateFace("mouth construction produced a degenerate face")
    return MouthAugmentation(
        new_vertices=new_vertices,
        new_faces=new_faces,
        part_label=np.asarray(labels, dtype=np.int64),
        upper_vertex_ids=ids[MouthPart.UPPER],
        lower_vertex_ids=ids[MouthPart.LOWER],
        base_vertex_count=V0,
        base_face_count=F0,
        centers=np.stack(centers),
    )


def splice(mesh: TriMesh, aug: MouthAugmentation, part_name: str = "mouth") -> TriMesh:
    """Append the augmentation to the mesh as one new part."""
    if mesh.n_vertices != aug.base_vertex_count or mesh.n_faces != aug.base_face_count:
        raise ValidationError("augmentation was built for a different mesh")
    new_part = mesh.n_parts
    return TriMesh(
        np.concatenate([mesh.vertices, aug.new_vertices]),
        np.concatenate([mesh.faces, aug.new_faces]),
        np.concatenate([mesh.part_of_face, np.full(len(aug.new_faces), new_part)]),
        list(mesh.part_names) + [part_name],
    )


def apply_part_offsets(mesh: TriMesh, aug: MouthAugmentation, dv_upper, dv_lower) -> TriMesh:
    if mesh.n_vertices != aug.base_vertex_count + len(aug.new_vertices):
        raise ValidationError("augmentation is not spliced into this mesh")
    return mesh.with_vertices(offset_vertices(mesh.vertices, aug, dv_upper, dv_lower))


def offset_vertices(vertices: np.ndarray, aug: MouthAugmentation, dv_upper, dv_lower) -> np.ndarray:
    v = np.array(vertices, dtype=np.float64, copy=True)
    v[aug.upper_vertex_ids] += np.asarray(dv_upper, dtype=np.float64)
    v[aug.lower_vertex_ids] += np.asarray(dv_lower, dtype=np.float64)
    return v
