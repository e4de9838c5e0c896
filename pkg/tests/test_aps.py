import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatrig.aps import FaceSetAssignment, assign_sets, part_distance, run_aps
from splatrig.errors import AlreadyRan, EmptyPart, TooFewParts, ValidationError
from splatrig.geometry import TriMesh
from splatrig.losses import FaceSet
from splatrig.splats import SplatSet, initialize_on_mesh


def strip_mesh(n_faces, parts):
    verts = [[i, 0.0, 0.0] for i in range(n_faces + 2)] + [[i, 1.0, 0.0] for i in range(n_faces + 2)]
    m = n_faces + 2
    faces = [[i, i + 1, m + i] for i in range(n_faces)]
    return TriMesh(verts, faces, parts)


def splats_with_radii(binding, radii):
    s = initialize_on_mesh(strip_mesh(max(binding) + 1, np.zeros(max(binding) + 1, int)), 1).take(np.zeros(len(binding), int))
    s.binding = np.asarray(binding)
    s.mu = np.zeros((len(binding), 3))
    s.mu[:, 0] = radii
    return s


def test_zero_offsets_zero_distance():
    mesh = strip_mesh(4, [0, 0, 1, 1])
    s = initialize_on_mesh(mesh, 2)
    assert part_distance(s, mesh, 0) == 0.0


def test_two_face_example():
    mesh = strip_mesh(2, [0, 0])
    s = splats_with_radii([0, 1, 1], [0.1, 0.3, 0.5])
    assert abs(part_distance(s, mesh, 0) - 0.25) < 1e-12


def test_homogeneous_in_offsets(rng):
    mesh = strip_mesh(6, [0, 0, 1, 1, 2, 2])
    s = initialize_on_mesh(mesh, 3)
    s.mu = rng.normal(size=s.mu.shape)
    d = [part_distance(s, mesh, k) for k in range(3)]
    s.mu *= 2
    d2 = [part_distance(s, mesh, k) for k in range(3)]
    assert np.allclose(d2, 2 * np.array(d), rtol=1e-14)


def test_empty_face_counts_zero():
    mesh = strip_mesh(2, [0, 0])
    s = splats_with_radii([0], [0.4])
    assert abs(part_distance(s, mesh, 0) - 0.2) < 1e-12


def test_empty_part_rejected():
    mesh = strip_mesh(2, [0, 0])
    mesh.part_names = ["a", "b"]
    with pytest.raises(EmptyPart):
        part_distance(initialize_on_mesh(mesh, 1), mesh, 1)


def test_assign_example():
    a = assign_sets([0.05, 0.50])
    assert abs(a.tau_part - 0.275) < 1e-12
    assert a.part_set.tolist() == [FaceSet.RIGID, FaceSet.FLEXIBLE]


def test_ties_go_rigid():
    a = assign_sets([0.3, 0.3, 0.3])
    assert a.tau_part == 0.3
    assert np.all(a.part_set == FaceSet.RIGID)


def test_mouth_excluded_and_forced():
    a = assign_sets([0.1, 0.3, 9.0], mouth_parts=[2], part_of_face=[0, 1, 2, 2])
    assert abs(a.tau_part - 0.2) < 1e-12
    assert a.part_set.tolist() == [FaceSet.RIGID, FaceSet.FLEXIBLE, FaceSet.MOUTH]
    assert a.set_of_face.tolist() == [0, 1, 2, 2]
    assert np.isnan(a.distances[2])


def test_too_few_parts():
    with pytest.raises(TooFewParts):
        assign_sets([0.1, 0.2], mouth_parts=[1])


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=12))
def test_tau_is_mean(ds):
    a = assign_sets(ds)
    assert abs(a.tau_part - np.mean(ds)) <= 1e-12 * max(1.0, max(ds))


@given(st.lists(st.floats(1e-3, 10), min_size=2, max_size=12), st.floats(1e-3, 1e3))
def test_assignment_invariant_under_uniform_scaling(ds, c):
    ds = np.array(ds)
    a = assign_sets(ds)
    b = assign_sets(ds * c)
    # skip values that sit within round-off of the threshold
    near = np.abs(ds - a.tau_part) <= 1e-9 * a.tau_part
    assert np.array_equal(a.part_set[~near], b.part_set[~near])


def test_every_part_is_whole(rng):
    parts = rng.integers(0, 4, size=40)
    parts[:4] = range(4)
    a = assign_sets(rng.uniform(size=4), part_of_face=parts)
    for k in range(4):
        assert np.all(a.set_of_face[parts == k] == a.part_set[k])


class _State:
    def __init__(self, splats, step, aps_step, part_of_face, mouth=()):
        self.splats = splats
        self.step = step
        self.aps_step = aps_step
        self.aps_done = False
        self.assignment = FaceSetAssignment.initial(part_of_face, mouth)


def test_run_aps_once(rng):
    mesh = strip_mesh(6, [0, 0, 1, 1, 2, 2])
    s = initialize_on_mesh(mesh, 2)
    s.mu[mesh.part_of_face[s.binding] == 1, 2] = 0.5
    st_ = _State(s, 10, 10, mesh.part_of_face, mouth=(2,))
    assert st_.assignment.part_set.tolist() == [0, 0, 2]
    ev = run_aps(st_, mesh, mouth_parts=(2,))
    assert st_.aps_done
    assert st_.assignment.part_set.tolist() == [FaceSet.RIGID, FaceSet.FLEXIBLE, FaceSet.MOUTH]
    assert any(line.startswith("tau_part=") for line in ev.lines)
    assert sum(1 for line in ev.lines if "distance=" in line) == 3
    assert ev.counts["total"] == len(s)
    assert ev.counts["flexible"] == 4 and ev.counts["mouth"] == 4
    with pytest.raises(AlreadyRan):
        run_aps(st_, mesh, mouth_parts=(2,))


def test_run_aps_wrong_step():
    mesh = strip_mesh(4, [0, 0, 1, 1])
    st_ = _State(initialize_on_mesh(mesh, 1), 3, 10, mesh.part_of_face)
    with pytest.raises(ValidationError):
        run_aps(st_, mesh)
