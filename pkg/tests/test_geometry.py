import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_mesh, random_rotation
from splatrig.errors import DegenerateFace, NearSingular, ValidationError
from splatrig.geometry import (
    TriMesh,
    axis_angle_to_matrix,
    compute_face_frame,
    face_frames,
    matrix_to_quat,
    polar_gradients,
    quat_mul,
    quat_to_matrix,
    to_polar,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def unit_triangle():
    return TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [0])


def test_unit_right_triangle_frame():
    fr = compute_face_frame(unit_triangle(), 0)
    assert np.allclose(fr.center, [1 / 3, 1 / 3, 0], atol=1e-15)
    assert np.allclose(fr.rotation[:, 2], [0, 0, 1], atol=1e-15)
    assert np.allclose(fr.rotation[:, 0], [1, 0, 0], atol=1e-15)
    assert fr.scale == pytest.approx((2 + np.sqrt(2)) / 3, abs=1e-15)


def test_frames_orthonormal_right_handed(rng):
    mesh = random_mesh(rng, 50)
    R, C, S = face_frames(mesh.vertices, mesh.faces)
    eye = np.einsum("fji,fjk->fik", R, R)
    assert np.abs(eye - np.eye(3)).max() < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9
    assert np.all(S > 0)


def test_frame_equivariance_under_rigid_motion(rng):
    for _ in range(100):
        mesh = random_mesh(rng, 4)
        Q = random_rotation(rng)
        t = rng.normal(size=3)
        R, C, S = face_frames(mesh.vertices, mesh.faces)
        R2, C2, S2 = face_frames(mesh.vertices @ Q.T + t, mesh.faces)
        assert np.abs(R2 - Q @ R).max() < 1e-9
        assert np.abs(C2 - (C @ Q.T + t)).max() < 1e-9
        assert np.abs(S2 - S).max() < 1e-12


def test_translation_keeps_rotation_and_scale(rng):
    mesh = random_mesh(rng, 10)
    delta = np.array([0.3, -1.2, 2.5])
    R, C, S = face_frames(mesh.vertices, mesh.faces)
    R2, C2, S2 = face_frames(mesh.vertices + delta, mesh.faces)
    assert np.abs(R2 - R).max() < 1e-12
    assert np.abs(S2 - S).max() < 1e-12
    assert np.abs(C2 - C - delta).max() < 1e-12


def test_degenerate_face_rejected():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]], [0])
    with pytest.raises(DegenerateFace):
        compute_face_frame(mesh, 0)


def test_mesh_validation():
    with pytest.raises(ValidationError):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]], [0]).validate()
    with pytest.raises(ValidationError):
        # part 1 is empty
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [0], ["a", "b"]).validate()


def test_part_masks_partition_faces(rng):
    mesh = random_mesh(rng, 30, 4)
    sizes = [len(mesh.faces_of_part(k)) for k in range(mesh.n_parts)]
    assert sum(sizes) == mesh.n_faces
    seen = np.concatenate([mesh.faces_of_part(k) for k in range(mesh.n_parts)])
    assert np.array_equal(np.sort(seen), np.arange(mesh.n_faces))


@pytest.mark.parametrize(
    "mu, expect",
    [((1, 0, 0), (1, 0, np.pi / 2)), ((0, 0, 1), (1, np.pi / 2, 0)), ((0, 0, -1), (1, np.pi / 2, np.pi))],
)
def test_polar_axis_cases(mu, expect):
    p = to_polar(mu)
    assert (p.r, p.theta, p.phi) == pytest.approx(expect, abs=1e-15)


def test_polar_zero_vector():
    p = to_polar((0, 0, 0))
    assert (p.r, p.theta, p.phi) == (0.0, 0.0, 0.0)


@given(vec3)
def test_polar_round_trip_direction_cosines(mu):
    mu = np.array(mu)
    r = np.linalg.norm(mu)
    if r < 1e-6:
        return
    p = to_polar(mu)
    assert p.r == pytest.approx(r, rel=1e-12)
    assert abs(np.cos(p.theta) - mu[0] / r) < 1e-12
    assert abs(np.cos(p.phi) - mu[2] / r) < 1e-12
    assert np.cos(p.theta) ** 2 + np.cos(p.phi) ** 2 <= 1 + 1e-9


def test_polar_gradient_axis_case():
    dr, _ = polar_gradients((1.0, 0.0, 0.0))
    assert np.allclose(dr, [1, 0, 0], atol=1e-15)


def test_polar_gradient_pole_is_singular():
    with pytest.raises(NearSingular):
        polar_gradients((0.0, 0.0, 1.0))
    with pytest.raises(NearSingular):
        polar_gradients((0.0, 0.0, 0.0))


def test_polar_gradient_matches_central_differences():
    mu = np.array([0.3, 0.4, 0.5])
    dr, dphi = polar_gradients(mu)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num_r = (to_polar(mu + e).r - to_polar(mu - e).r) / (2 * h)
        num_phi = (to_polar(mu + e).phi - to_polar(mu - e).phi) / (2 * h)
        assert abs(dr[i] - num_r) <= 1e-5 * max(abs(num_r), 1e-3)
        assert abs(dphi[i] - num_phi) <= 1e-5 * max(abs(num_phi), 1e-3)


@given(st.tuples(finite, finite, finite))
def test_quaternion_matrix_round_trip(v):
    R = axis_angle_to_matrix(np.array(v) / 4)
    q = matrix_to_quat(R)
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    assert np.abs(quat_to_matrix(q) - R).max() < 1e-9


def test_quat_mul_composes_rotations(rng):
    for _ in range(20):
        A, B = random_rotation(rng), random_rotation(rng)
        q = quat_mul(matrix_to_quat(A), matrix_to_quat(B))
        assert np.abs(quat_to_matrix(q) - A @ B).max() < 1e-9
