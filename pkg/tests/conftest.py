import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatrig.geometry import TriMesh
from splatrig.renderer import Camera

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_mesh(rng, n_faces: int = 12, n_parts: int = 3) -> TriMesh:
    """Disjoint random triangles with well-conditioned shapes."""
    verts, faces = [], []
    for f in range(n_faces):
        c = rng.normal(size=3)
        tri = c + 0.3 * rng.normal(size=(3, 3))
        while np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 0.05:
            tri = c + 0.3 * rng.normal(size=(3, 3))
        verts.extend(tri)
        faces.append([3 * f, 3 * f + 1, 3 * f + 2])
    parts = np.arange(n_faces) % n_parts
    return TriMesh(np.array(verts), np.array(faces), parts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_camera():
    return Camera(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
