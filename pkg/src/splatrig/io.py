"""File formats: OBJ subset, JSON sidecars, binary PPM and the GAVT checkpoint.

GAVT checkpoint layout (all little-endian)::

    magic      4s   b"GAVT"
    version    u32  1
    n_splats   u32
    n_faces    u32  faces covered by the stored assignment
    n_sections u32
    records    n_splats x 14 f64   mu(3) rot(4) log_scale(3) color(3) opacity_logit(1)
    binding    n_splats x u32
    sections   n_sections x (tag 4s, length u64, payload)

Section tags: ``ASGN`` face-set assignment, ``DEFN`` deformation networks,
``OPTM`` optimizer moments, ``DENS`` densification statistics, ``META``
UTF-8 JSON (step counters, RNG state, config).
"""
from __future__ import annotations

import io as _io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadCheckpoint, ValidationError
from .geometry import TriMesh

MAGIC = b"GAVT"
VERSION = 1


# --- OBJ --------------------------------------------------------------------


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangle faces (0-based) from the ``v``/``f`` records of an OBJ file."""
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ValidationError(f"line {lineno}: vertex needs 3 coordinates")
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            if len(idx) != 3:
                raise ValidationError(f"line {lineno}: only triangles are supported")
            nv = len(verts)
            faces.append([i - 1 if i > 0 else nv + i for i in idx])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_parts(path, mesh: TriMesh) -> None:
    parts = {name: mesh.faces_of_part(k).tolist() for k, name in enumerate(mesh.part_names)}
    Path(path).write_text(json.dumps({"parts": parts}, indent=1) + "\n")


def read_parts(path, n_faces: int) -> tuple[np.ndarray, list[str]]:
    """Part ids per face from a ``{"parts": {name: [face ids]}}`` sidecar; must partition the faces."""
    data = json.loads(Path(path).read_text())
    parts = data["parts"] if "parts" in data else data
    part_of_face = np.full(n_faces, -1, dtype=np.int64)
    names = list(parts)
    for k, name in enumerate(names):
        ids = np.asarray(parts[name], dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= n_faces):
            raise ValidationError(f"part {name!r} references a face outside the mesh")
        if np.any(part_of_face[ids] >= 0):
            raise ValidationError(f"part {name!r} overlaps another part")
        part_of_face[ids] = k
    if np.any(part_of_face < 0):
        missing = np.flatnonzero(part_of_face < 0)
        raise ValidationError(f"{len(missing)} faces belong to no part (first: {missing[:5].tolist()})")
    return part_of_face, names


def load_mesh(obj_path, parts_path=None) -> TriMesh:
    v, f = read_obj(obj_path)
    if parts_path is None:
        mesh = TriMesh(v, f, np.zeros(len(f), dtype=np.int64), ["all"])
    else:
        part_of_face, names = read_parts(parts_path, len(f))
        mesh = TriMesh(v, f, part_of_face, names)
    mesh.validate(check_area=False)
    return mesh


# --- PPM --------------------------------------------------------------------


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-half-up to 8 bits."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    q = quantize(img)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.reshape(h, w, 3).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def decode_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ValidationError("only binary P6 PPM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValidationError("only maxval 255 is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(quantize(img)).save(path)


# --- checkpoint ---------------------------------------------------------------


def _section(tag: bytes, payload: bytes) -> bytes:
    return struct.pack("<4sQ", tag, len(payload)) + payload


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _pack_arrays(named: dict) -> bytes:
    out = _io.BytesIO()
    out.write(struct.pack("<I", len(named)))
    for key, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        kb = key.encode("utf-8")
        out.write(struct.pack("<I", len(kb)) + kb)
        out.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(_f64(arr))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BadCheckpoint("truncated checkpoint")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def arrays(self) -> dict:
        (n,) = self.unpack("<I")
        out = {}
        for _ in range(n):
            (kl,) = self.unpack("<I")
            key = self.take(kl).decode("utf-8")
            (nd,) = self.unpack("<I")
            shape = self.unpack(f"<{nd}Q") if nd else ()
            out[key] = self.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        return out


def encode_checkpoint(ckpt: dict) -> bytes:
    """Serialise a checkpoint dict (see ``trainer.state_to_checkpoint``)."""
    splats = ckpt["splats"]
    n = len(splats)
    records = np.concatenate(
        [splats.mu, splats.rot, splats.log_scale, splats.color, splats.opacity_logit[:, None]], axis=1
    )
    asg = ckpt["assignment"]
    sections = []
    dist = asg.distances
    payload = struct.pack("<I", len(asg.part_set)) + np.asarray(asg.part_set, dtype="<u1").tobytes()
    payload += struct.pack("<I", len(asg.set_of_face)) + np.asarray(asg.set_of_face, dtype="<u1").tobytes()
    payload += struct.pack("<B", dist is not None)
    if dist is not None:
        payload += _f64(dist) + struct.pack("<d", asg.tau_part)
    sections.append(_section(b"ASGN", payload))

    nets = ckpt.get("nets") or {}
    buf = _io.BytesIO()
    buf.write(struct.pack("<I", len(nets)))
    for name, net in nets.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<IIIBI", net.psi_dim, net.theta_dim, net.enc.num_freqs, net.enc.include_input, len(net.weights)))
        for W, b in zip(net.weights, net.biases):
            buf.write(struct.pack("<II", *W.shape))
            buf.write(_f64(W) + _f64(b))
    sections.append(_section(b"DEFN", buf.getvalue()))

    for tag, key in ((b"OPTM", "optimizer"), (b"DENS", "densify")):
        if ckpt.get(key) is not None:
            sections.append(_section(tag, _pack_arrays(ckpt[key])))
    if ckpt.get("meta") is not None:
        sections.append(_section(b"META", json.dumps(ckpt["meta"], sort_keys=True).encode("utf-8")))

    head = struct.pack("<4sIIII", MAGIC, VERSION, n, len(asg.set_of_face), len(sections))
    return head + _f64(records) + np.asarray(splats.binding, dtype="<u4").tobytes() + b"".join(sections)


def decode_checkpoint(data: bytes) -> dict:
    from .aps import FaceSetAssignment
    from .deform import DeformMLP, PosEncoding
    from .splats import SplatSet

    r = _Reader(data)
    magic, version, n, n_faces, n_sections = r.unpack("<4sIIII")
    if magic != MAGIC:
        raise BadCheckpoint("not a GAVT checkpoint")
    if version != VERSION:
        raise BadCheckpoint(f"unsupported checkpoint version {version}")
    rec = r.f64(n * 14).reshape(n, 14)
    binding = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    splats = SplatSet(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10:13], rec[:, 13], binding)
    out = {"splats": splats, "nets": {}, "optimizer": None, "densify": None, "meta": None, "assignment": None}
    for _ in range(n_sections):
        tag, length = r.unpack("<4sQ")
        sub = _Reader(r.take(length))
        if tag == b"ASGN":
            (np_,) = sub.unpack("<I")
            part_set = np.frombuffer(sub.take(np_), dtype="<u1").astype(np.int64)
            (nf,) = sub.unpack("<I")
            set_of_face = np.frombuffer(sub.take(nf), dtype="<u1").astype(np.int64)
            (has,) = sub.unpack("<B")
            dist = tau = None
            if has:
                dist = sub.f64(np_)
                (tau,) = sub.unpack("<d")
            out["assignment"] = FaceSetAssignment(part_set, set_of_face, dist, tau)
        elif tag == b"DEFN":
            (count,) = sub.unpack("<I")
            for _ in range(count):
                (nl,) = sub.unpack("<I")
                name = sub.take(nl).decode("utf-8")
                psi_dim, theta_dim, nfreq, inc, layers = sub.unpack("<IIIBI")
                Ws, bs = [], []
                for _ in range(layers):
                    rows, cols = sub.unpack("<II")
                    Ws.append(sub.f64(rows * cols).reshape(rows, cols))
                    bs.append(sub.f64(rows))
                out["nets"][name] = DeformMLP(psi_dim, theta_dim, PosEncoding(nfreq, bool(inc)), Ws, bs)
        elif tag == b"OPTM":
            out["optimizer"] = sub.arrays()
        elif tag == b"DENS":
            out["densify"] = sub.arrays()
        elif tag == b"META":
            out["meta"] = json.loads(sub.take(length).decode("utf-8"))
        else:
            raise BadCheckpoint(f"unknown section {tag!r}")
    if out["assignment"] is None:
        raise BadCheckpoint("checkpoint has no assignment section")
    if len(out["assignment"].set_of_face) != n_faces:
        raise BadCheckpoint("assignment size does not match header")
    if r.pos != len(data):
        raise BadCheckpoint("trailing bytes after checkpoint")
    return out


def save_checkpoint(path, ckpt: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BadCheckpoint(str(exc)) from exc
    return decode_checkpoint(data)


# --- scene directories --------------------------------------------------------
#
#   scene.json   {"format": 1, "seed": int, "spec": SceneSpec fields}
#   params.json  {"frames": [RigParams fields, ...], "train": [...], "test": [...]}
#   camera.json  Camera fields
#   truth.json   {part name: "rigid" | "flexible"}
#   mesh.obj, parts.json
#   frames/00000.ppm ...

SCENE_FORMAT = 1


def save_scene(path, scene) -> None:
    d = Path(path)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "scene.json").write_text(json.dumps({"format": SCENE_FORMAT, "seed": scene.seed, "spec": scene.spec.to_dict()}, indent=1) + "\n")
    frames = {"frames": [p.to_dict() for p in scene.params], "train": scene.train_ids, "test": scene.test_ids}
    (d / "params.json").write_text(json.dumps(frames, indent=1) + "\n")
    (d / "camera.json").write_text(json.dumps(scene.camera.to_dict(), indent=1) + "\n")
    (d / "truth.json").write_text(json.dumps(scene.truth, indent=1) + "\n")
    write_obj(d / "mesh.obj", scene.rig.base)
    write_parts(d / "parts.json", scene.rig.base)
    for i, img in enumerate(scene.images):
        write_ppm(d / "frames" / f"{i:05d}.ppm", img)


def load_scene(path, threads: int = 1):
    """Rebuild a saved scene; frames come from the stored PPMs, the rig from the spec and seed."""
    from .rig import RigParams, SceneSpec, generate_scene

    d = Path(path)
    try:
        meta = json.loads((d / "scene.json").read_text())
        frames = json.loads((d / "params.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"not a scene directory: {d} ({exc})") from exc
    if meta.get("format") != SCENE_FORMAT:
        raise ValidationError(f"unsupported scene format {meta.get('format')!r}")
    scene = generate_scene(SceneSpec.from_dict(meta["spec"]), int(meta["seed"]), threads, render_images=False)
    scene.params = [RigParams.from_dict(p) for p in frames["frames"]]
    paths = sorted((d / "frames").glob("*.ppm"))
    if len(paths) != len(scene.params):
        raise ValidationError(f"scene has {len(scene.params)} parameter sets but {len(paths)} frames")
    scene.images = [read_ppm(p) for p in paths]
    return scene
