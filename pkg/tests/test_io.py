import struct

import numpy as np
import pytest

from splatrig.aps import FaceSetAssignment
from splatrig.deform import DeformMLP
from splatrig.errors import BadCheckpoint, ValidationError
from splatrig.io import (
    decode_checkpoint,
    decode_ppm,
    encode_checkpoint,
    encode_ppm,
    load_mesh,
    load_scene,
    quantize,
    read_obj,
    read_ppm,
    save_scene,
    write_obj,
    write_parts,
    write_ppm,
)
from splatrig.rig import build_head, generate_scene, preset_spec
from splatrig.splats import initialize_on_mesh


def test_obj_round_trip_exact(tmp_path, rng):
    mesh, _, _ = build_head(True)
    mesh = mesh.with_vertices(mesh.vertices + rng.normal(size=mesh.vertices.shape) * 1e-3)
    write_obj(tmp_path / "m.obj", mesh)
    write_parts(tmp_path / "p.json", mesh)
    back = load_mesh(tmp_path / "m.obj", tmp_path / "p.json")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.array_equal(back.part_of_face, mesh.part_of_face)
    assert back.part_names == mesh.part_names
    write_obj(tmp_path / "m2.obj", back)
    assert (tmp_path / "m.obj").read_bytes() == (tmp_path / "m2.obj").read_bytes()


def test_obj_subset_parsing(tmp_path):
    (tmp_path / "a.obj").write_text("# hi\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n")
    v, f = read_obj(tmp_path / "a.obj")
    assert f.tolist() == [[0, 1, 2]]
    (tmp_path / "b.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")
    with pytest.raises(ValidationError):
        read_obj(tmp_path / "b.obj")


def test_parts_must_partition(tmp_path):
    mesh, _, _ = build_head(False)
    write_obj(tmp_path / "m.obj", mesh)
    (tmp_path / "p.json").write_text('{"parts": {"a": [0, 1], "b": [1]}}')
    with pytest.raises(ValidationError):
        load_mesh(tmp_path / "m.obj", tmp_path / "p.json")
    (tmp_path / "p.json").write_text('{"parts": {"a": [0, 1]}}')
    with pytest.raises(ValidationError):
        load_mesh(tmp_path / "m.obj", tmp_path / "p.json")


def test_ppm_round_trip(tmp_path, rng):
    img = rng.uniform(size=(7, 5, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    write_ppm(tmp_path / "b.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_ppm_rounds_half_up():
    q = quantize(np.array([0.5 / 255, 1.5 / 255, 254.5 / 255, -1.0, 2.0]))
    assert q.tolist() == [1, 2, 255, 0, 255]


def test_ppm_golden_bytes():
    img = np.zeros((2, 2, 3))
    img[0, 0] = [1.0, 0.5, 0.0]
    img[1, 1] = [0.2, 0.4, 0.6]
    expect = b"P6\n2 2\n255\n" + bytes([255, 128, 0, 0, 0, 0, 0, 0, 0, 51, 102, 153])
    assert encode_ppm(img) == expect
    assert np.array_equal(quantize(decode_ppm(expect)), quantize(img))


def test_ppm_header_comments():
    data = b"P6\n# c\n1 1\n# d\n255\n" + bytes([10, 20, 30])
    assert np.allclose(decode_ppm(data)[0, 0] * 255, [10, 20, 30])
    with pytest.raises(ValidationError):
        decode_ppm(b"P5\n1 1\n255\n\x00")


def _checkpoint(rng):
    mesh, _, _ = build_head(True)
    s = initialize_on_mesh(mesh, 2)
    s.mu = rng.normal(size=s.mu.shape)
    s.color = rng.uniform(size=s.color.shape)
    asg = FaceSetAssignment.initial(mesh.part_of_face, (mesh.n_parts - 1,))
    asg.distances = rng.uniform(size=mesh.n_parts)
    asg.tau_part = 0.123
    net = DeformMLP.create(4, 1, (5, 5), rng=rng)
    net.weights[-1][...] = rng.normal(size=net.weights[-1].shape)
    opt = {"t": np.array([3.0]), "m/mu": rng.normal(size=s.mu.shape)}
    return {"splats": s, "assignment": asg, "nets": {"upper": net}, "optimizer": opt, "meta": {"step": 3, "x": [1, 2]}}


def test_checkpoint_round_trip_bit_exact(rng):
    ck = _checkpoint(rng)
    data = encode_checkpoint(ck)
    back = decode_checkpoint(data)
    for k in ("mu", "rot", "log_scale", "color", "opacity_logit", "binding"):
        assert np.array_equal(getattr(back["splats"], k), getattr(ck["splats"], k))
    assert np.array_equal(back["assignment"].set_of_face, ck["assignment"].set_of_face)
    assert np.array_equal(back["assignment"].distances, ck["assignment"].distances)
    assert back["assignment"].tau_part == 0.123
    for a, b in zip(back["nets"]["upper"].weights, ck["nets"]["upper"].weights):
        assert np.array_equal(a, b)
    assert np.array_equal(back["optimizer"]["m/mu"], ck["optimizer"]["m/mu"])
    assert back["meta"] == ck["meta"]
    assert encode_checkpoint(back) == data


def test_checkpoint_header_layout(rng):
    ck = _checkpoint(rng)
    data = encode_checkpoint(ck)
    magic, version, n, nf, _ = struct.unpack("<4sIIII", data[:20])
    assert (magic, version, n) == (b"GAVT", 1, len(ck["splats"]))
    assert nf == len(ck["assignment"].set_of_face)


def test_bad_checkpoints(rng):
    data = encode_checkpoint(_checkpoint(rng))
    with pytest.raises(BadCheckpoint):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(BadCheckpoint):
        decode_checkpoint(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(BadCheckpoint):
        decode_checkpoint(data[:-3])
    with pytest.raises(BadCheckpoint):
        decode_checkpoint(data + b"\x00")


def test_scene_directory_round_trip(tmp_path):
    sc = generate_scene(preset_spec("smoke", n_frames=3, width=20, height=20), seed=2)
    save_scene(tmp_path / "s", sc)
    back = load_scene(tmp_path / "s")
    assert len(back.images) == 3
    for a, b in zip(back.images, sc.images):
        assert np.array_equal(quantize(a), quantize(b))
    for a, b in zip(back.params, sc.params):
        assert np.array_equal(a.psi, b.psi) and a.T == b.T
    with pytest.raises(ValidationError):
        load_scene(tmp_path / "missing")
