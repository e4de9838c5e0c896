"""Synthetic stand-in for a tracked morphable head.

A linear blendshape rig on a sphere-patch "head" with named parts, a jaw
joint, and optionally the mouth interior spliced in. Scenes are rendered
from reference splats that sit at controlled offsets from the animated mesh,
so the right rigid/flexible split is known in advance.

The targets come out of the same renderer that is later fitted to them
(an inverse-crime setup): good for checking the machinery, not for claims
about real footage.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .geometry import TriMesh, axis_angle_to_matrix
from .mouth import MouthAugmentation, MouthPart, build_mouth_structure, offset_vertices, splice
from .renderer import Camera, render
from .splats import SplatSet, frames_for, initialize_on_mesh, logit, transform_to_global

HEAD_PARTS = ["face", "lips", "eyes", "ears", "nose", "scalp", "neck", "boundary", "jaw"]


@dataclass
class RigParams:
    psi: np.ndarray
    theta: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T: float = 0.0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.T = float(self.T)

    def to_dict(self) -> dict:
        return {
            "psi": self.psi.tolist(), "theta": self.theta.tolist(), "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(), "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigParams":
        return cls(**d)


@dataclass
class BlendRig:
    base: TriMesh
    expr_basis: np.ndarray  # (V, 3, E)
    jaw_mask: np.ndarray  # (V,) bool
    jaw_pivot: np.ndarray
    jaw_axis: np.ndarray
    theta_dim: int = 1
    aug: MouthAugmentation | None = None

    @property
    def psi_dim(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def mouth_part(self) -> int | None:
        return None if self.aug is None else self.base.n_parts - 1

    @property
    def mouth_parts(self) -> tuple:
        return () if self.aug is None else (self.mouth_part,)

    def zero_params(self) -> RigParams:
        return RigParams(np.zeros(self.psi_dim), np.zeros(self.theta_dim))


def evaluate_vertices(rig: BlendRig, params: RigParams) -> np.ndarray:
    if len(params.psi) != rig.psi_dim or len(params.theta) != rig.theta_dim:
        raise DimensionMismatch(
            f"rig expects psi[{rig.psi_dim}], theta[{rig.theta_dim}]; got psi[{len(params.psi)}], theta[{len(params.theta)}]"
        )
    V = rig.base.vertices + rig.expr_basis @ params.psi
    jaw = params.theta[0] if rig.theta_dim else 0.0
    if jaw != 0.0 and rig.jaw_mask.any():
        Rj = axis_angle_to_matrix(rig.jaw_axis * jaw)
        idx = rig.jaw_mask
        V[idx] = (V[idx] - rig.jaw_pivot) @ Rj.T + rig.jaw_pivot
    if np.any(params.rotation != 0.0):
        V = V @ axis_angle_to_matrix(params.rotation).T
    if np.any(params.translation != 0.0):
        V = V + params.translation
    return V


def evaluate_rig(rig: BlendRig, params: RigParams) -> TriMesh:
    return rig.base.with_vertices(evaluate_vertices(rig, params))


# --- geometry builders ------------------------------------------------------


def sphere_patch(lons_deg, lats_deg, radius: float = 1.0, keep_cell=None):
    """Grid on a sphere facing +z. Returns vertices, faces, per-face cell centres (lon, lat in degrees)."""
    lons = np.radians(np.asarray(lons_deg, dtype=np.float64))
    lats = np.radians(np.asarray(lats_deg, dtype=np.float64))
    LA, LO = np.meshgrid(lats, lons, indexing="ij")
    verts = radius * np.stack([np.sin(LO) * np.cos(LA), np.sin(LA), np.cos(LO) * np.cos(LA)], axis=-1).reshape(-1, 3)
    nc = len(lons)
    faces, centers = [], []
    for i in range(len(lats) - 1):
        for j in range(nc - 1):
            clon = 0.5 * (lons_deg[j] + lons_deg[j + 1])
            clat = 0.5 * (lats_deg[i] + lats_deg[i + 1])
            if keep_cell is not None and not keep_cell(clon, clat):
                continue
            v00, v01 = i * nc + j, i * nc + j + 1
            v10, v11 = (i + 1) * nc + j, (i + 1) * nc + j + 1
            faces += [(v00, v01, v11), (v00, v11, v10)]
            centers += [(clon, clat), (clon, clat)]
    return verts, np.asarray(faces, dtype=np.int64), np.asarray(centers)


def _compact(verts, faces):
    used = np.unique(faces)
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces], remap


MOUTH_HALF_WIDTH = 21.0
LOWER_LIP_LAT = -16.0
UPPER_LIP_LAT = -4.0


def _head_part(lon: float, lat: float) -> str:
    a = abs(lon)
    if lat < -30:
        return "neck"
    if a < MOUTH_HALF_WIDTH + 6 and LOWER_LIP_LAT - 6 < lat < UPPER_LIP_LAT + 6:
        return "lips"
    if lat < LOWER_LIP_LAT:
        return "jaw"
    if lat > 40:
        return "scalp"
    if a > 55:
        return "ears"
    if a > 42:
        return "boundary"
    if 8 < a < 32 and 12 < lat < 30:
        return "eyes"
    if a < 8 and UPPER_LIP_LAT < lat < 28:
        return "nose"
    return "face"


def build_head(with_mouth: bool = True, mouth_depth: float = 0.08):
    """Ten-part synthetic head (nine without the mouth).

    Returns ``(mesh, aug, jaw_mask)``; ``aug`` is None without the mouth.
    """
    lats = [-50, -40, -30, -22, LOWER_LIP_LAT, -10, UPPER_LIP_LAT, 2, 10, 18, 28, 40, 52, 64]
    if with_mouth:
        fine = list(np.arange(-MOUTH_HALF_WIDTH, MOUTH_HALF_WIDTH + 1e-9, 3.0))
        lons = [-70, -60, -50, -42, -32, -24] + fine + [24, 32, 42, 50, 60, 70]

        def keep(lon, lat):
            return not (abs(lon) < MOUTH_HALF_WIDTH and LOWER_LIP_LAT < lat < UPPER_LIP_LAT)
    else:
        lons = [-70, -60, -50, -42, -32, -24, -16, -8, 0, 8, 16, 24, 32, 42, 50, 60, 70]
        keep = None
    lons = [float(x) for x in lons]
    lats = [float(x) for x in lats]
    verts, faces, centers = sphere_patch(lons, lats, keep_cell=keep)
    nc = len(lons)
    lat_of_vertex = np.repeat(np.asarray(lats), nc)
    lon_of_vertex = np.tile(np.asarray(lons), len(lats))
    verts, faces, remap = _compact(verts, faces)
    lat_of_vertex = lat_of_vertex[remap >= 0]
    lon_of_vertex = lon_of_vertex[remap >= 0]

    names = [_head_part(lon, lat) for lon, lat in centers]
    part_ids = np.array([HEAD_PARTS.index(n) for n in names])
    mesh = TriMesh(verts, faces, part_ids, list(HEAD_PARTS))
    jaw_mask = (lat_of_vertex <= LOWER_LIP_LAT) & (lat_of_vertex > -30)
    aug = None
    if with_mouth:
        ring = np.abs(lon_of_vertex) <= MOUTH_HALF_WIDTH + 1e-9

        def ring_ids(lat):
            ids = np.flatnonzero(ring & (lat_of_vertex == lat))
            return ids[np.argsort(lon_of_vertex[ids])]

        aug = build_mouth_structure(mesh, ring_ids(UPPER_LIP_LAT), ring_ids(LOWER_LIP_LAT), depth=mouth_depth)
        mesh = splice(mesh, aug)
        jaw_mask = np.concatenate([jaw_mask, np.zeros(len(aug.new_vertices), bool)])
        jaw_mask[aug.lower_vertex_ids] = True
    return mesh, aug, jaw_mask


def build_patch(n_cols: int = 10, n_rows: int = 10, n_parts: int = 3, span_deg: float = 50.0):
    """Small sphere patch split into vertical bands, one part per band."""
    lons = list(np.linspace(-span_deg, span_deg, n_cols + 1))
    lats = list(np.linspace(-span_deg * 0.8, span_deg * 0.8, n_rows + 1))
    verts, faces, centers = sphere_patch(lons, lats)
    edges = np.linspace(-span_deg, span_deg, n_parts + 1)
    part = np.clip(np.searchsorted(edges, centers[:, 0], side="right") - 1, 0, n_parts - 1)
    names = [f"band{k}" for k in range(n_parts)]
    return TriMesh(verts, faces, part, names)


def smooth_basis(vertices: np.ndarray, dim: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency displacement fields, one per expression coefficient."""
    V = len(vertices)
    basis = np.zeros((V, 3, dim))
    for e in range(dim):
        k = rng.normal(0.0, 2.0, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        pattern = np.sin(vertices @ k + phase)
        basis[:, :, e] = amplitude * pattern[:, None] * direction[None, :]
    return basis


# --- scenes -----------------------------------------------------------------


@dataclass
class SceneSpec:
    preset: str = "head"  # head | patch
    with_mouth: bool = True
    width: int = 64
    height: int = 64
    n_frames: int = 20
    n_test: int = 0
    psi_dim: int = 4
    theta_dim: int = 1
    per_face: int = 1
    patch_parts: int = 3
    patch_cols: int = 10
    patch_rows: int = 10
    # local-units offset magnitude per part name; others get default_detail
    detail: dict = field(default_factory=dict)
    default_detail: float = 0.02
    detail_angle: float = 0.35  # radians from the face normal for large offsets
    expr_amplitude: float = 0.03
    basis_scale: float = 1.0  # displacement per unit expression coefficient
    jaw_amplitude: float = 0.2
    pose_amplitude: float = 0.05
    translation_amplitude: float = 0.02
    # frames per motion cycle shared by all channels; 0 gives each channel its own frequency
    loop_period: float = 0.0
    # unmodelled per-part mouth motion (model units per unit of animation input)
    mouth_drift: float = 0.0
    mouth_depth: float = 0.08
    fx_scale: float = 1.25
    eye: tuple = (0.0, 0.1, 3.0)
    target: tuple = (0.0, 0.1, 0.0)
    background: tuple = (0.0, 0.0, 0.0)
    opacity: float = 0.92
    texture_contrast: float = 0.45  # per-splat brightness varies in [1 - contrast, 1]
    gt_log_scale: float = float(np.log(0.5))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eye"] = list(self.eye)
        d["target"] = list(self.target)
        d["background"] = list(self.background)
        return d

    def validate(self) -> "SceneSpec":
        if self.preset not in ("head", "patch"):
            raise ConfigError(f"preset must be head or patch, got {self.preset!r}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be positive")
        if self.n_frames < 1 or not 0 <= self.n_test < self.n_frames:
            raise ConfigError(f"need 0 <= n_test < n_frames, got n_test={self.n_test} n_frames={self.n_frames}")
        if self.per_face < 1:
            raise ConfigError("per_face must be >= 1")
        if self.loop_period < 0:
            raise ConfigError("loop_period must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("eye", "target", "background"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


PRESETS = {
    "smoke": dict(preset="patch", with_mouth=False, n_frames=20, n_test=0, patch_parts=3,
                  expr_amplitude=0.03, jaw_amplitude=0.0, pose_amplitude=0.05, eye=(0.0, 0.0, 2.6),
                  target=(0.0, 0.0, 0.0), fx_scale=1.1),
    # flexible truth is one connected region around the back and sides of the
    # head; strong pose and texture make the rigid parts well constrained
    "aps": dict(preset="head", with_mouth=False, n_frames=20, n_test=0, jaw_amplitude=0.1,
                detail={"scalp": 0.5, "neck": 0.5, "ears": 0.5, "boundary": 0.5},
                detail_angle=0.0, pose_amplitude=0.8, texture_contrast=0.9),
    # O(1) expression coefficients, as a tracked face model would give the
    # deformation networks
    "mouth": dict(preset="head", with_mouth=True, n_frames=24, n_test=6, jaw_amplitude=0.25, loop_period=8.6,
                  expr_amplitude=1.0, basis_scale=0.03,
                  mouth_drift=0.05, eye=(0.0, 0.15, 2.5), target=(0.0, -0.17, 0.9), fx_scale=1.6,
                  pose_amplitude=0.02),
    "head": dict(preset="head", with_mouth=True, n_frames=20, n_test=4),
}


def preset_spec(name: str, **overrides) -> SceneSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SceneSpec(**{**PRESETS[name], **overrides})


@dataclass
class Scene:
    spec: SceneSpec
    seed: int
    rig: BlendRig
    camera: Camera
    params: list
    images: list
    reference: SplatSet
    truth: dict  # part name -> "rigid" | "flexible"
    drift: np.ndarray | None = None  # (2, 3, psi_dim + theta_dim)

    @property
    def train_ids(self) -> list[int]:
        return list(range(len(self.params) - self.spec.n_test))

    @property
    def test_ids(self) -> list[int]:
        return list(range(len(self.params) - self.spec.n_test, len(self.params)))


def build_rig(spec: SceneSpec, rng: np.random.Generator) -> BlendRig:
    if spec.preset == "patch":
        mesh = build_patch(spec.patch_cols, spec.patch_rows, spec.patch_parts)
        aug = None
        jaw_mask = np.zeros(mesh.n_vertices, bool)
    elif spec.preset == "head":
        mesh, aug, jaw_mask = build_head(spec.with_mouth, spec.mouth_depth)
    else:
        raise ValueError(f"unknown rig preset {spec.preset!r}")
    basis = smooth_basis(mesh.vertices, spec.psi_dim, spec.basis_scale, rng)
    if aug is not None:
        # mouth parts move as rigid units: each gets the mean displacement of its lip ring
        nb = aug.base_vertex_count
        for ids, label in ((aug.upper_vertex_ids, MouthPart.UPPER), (aug.lower_vertex_ids, MouthPart.LOWER)):
            near = _nearest_base(mesh.vertices[:nb], mesh.vertices[ids])
            basis[ids] = basis[near].mean(axis=0, keepdims=True)
    return BlendRig(
        base=mesh,
        expr_basis=basis,
        jaw_mask=jaw_mask,
        jaw_pivot=np.array([0.0, -0.3, -0.3]),
        jaw_axis=np.array([1.0, 0.0, 0.0]),
        theta_dim=spec.theta_dim,
        aug=aug,
    )


def _nearest_base(base_vertices, query):
    d = np.linalg.norm(base_vertices[None, :, :] - query[:, None, :], axis=2)
    return np.unique(np.argmin(d, axis=1))


def make_camera(spec: SceneSpec) -> Camera:
    return Camera.look_at(spec.eye, spec.target, fx=spec.fx_scale * spec.width, width=spec.width, height=spec.height)


def frame_params(spec: SceneSpec, rng: np.random.Generator) -> list[RigParams]:
    F = spec.n_frames
    t = np.arange(F) / max(F - 1, 1)
    freq = rng.uniform(0.5, 2.0, size=spec.psi_dim)
    phase = rng.uniform(0, 2 * np.pi, size=spec.psi_dim)
    jaw_f, jaw_p = rng.uniform(1.0, 2.5), rng.uniform(0, 2 * np.pi)
    rot_f, rot_p = rng.uniform(0.5, 1.5, size=3), rng.uniform(0, 2 * np.pi, size=3)
    tr_p = rng.uniform(0, 2 * np.pi, size=3)
    tr_f = 1.0
    if spec.loop_period > 0:
        # every channel on one period: the motion is a closed loop, so later
        # frames revisit the same expression manifold at new phases
        cycles = (F - 1) / spec.loop_period
        freq = np.full(spec.psi_dim, cycles)
        jaw_f = cycles
        rot_f = np.full(3, cycles)
        tr_f = cycles
    out = []
    for i in range(F):
        psi = spec.expr_amplitude * np.sin(2 * np.pi * freq * t[i] + phase)
        theta = np.zeros(spec.theta_dim)
        if spec.theta_dim:
            theta[0] = spec.jaw_amplitude * 0.5 * (1.0 + np.sin(2 * np.pi * jaw_f * t[i] + jaw_p))
        rot = spec.pose_amplitude * np.sin(2 * np.pi * rot_f * t[i] + rot_p) * np.array([1.0, 1.0, 0.3])
        tr = spec.translation_amplitude * np.sin(2 * np.pi * tr_f * t[i] + tr_p)
        out.append(RigParams(psi, theta, rot, tr, t[i]))
    return out


def drift_offsets(drift: np.ndarray | None, params: RigParams):
    if drift is None:
        return np.zeros(3), np.zeros(3)
    x = np.concatenate([params.psi, params.theta])
    return drift[0] @ x, drift[1] @ x


def reference_splats(spec: SceneSpec, rig: BlendRig, rng: np.random.Generator):
    mesh = rig.base
    ref = initialize_on_mesh(mesh, spec.per_face)
    n = len(ref)
    part_of_splat = mesh.part_of_face[ref.binding]
    mags = np.full(n, spec.default_detail)
    big = np.zeros(n, bool)
    for name, mag in spec.detail.items():
        if name not in mesh.part_names:
            raise ValueError(f"detail names unknown part {name!r}")
        sel = part_of_splat == mesh.part_names.index(name)
        mags[sel] = mag
        big |= sel
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = spec.detail_angle
    dirs[big] = np.array([np.sin(a), 0.0, np.cos(a)])
    ref.mu = dirs * mags[:, None]
    # per-part hue with per-splat texture
    hues = rng.uniform(0.2, 0.9, size=(mesh.n_parts, 3))
    tex = rng.uniform(1.0 - spec.texture_contrast, 1.0, size=(n, 1))
    ref.color = np.clip(hues[part_of_splat] * tex, 0.0, 1.0)
    if rig.aug is not None:
        mouth = part_of_splat == rig.mouth_part
        ref.color[mouth] = rng.uniform(0.85, 1.0, size=(int(mouth.sum()), 1)) * np.array([1.0, 0.97, 0.9])
    ref.opacity_logit[:] = logit(spec.opacity)
    ref.log_scale[:] = spec.gt_log_scale
    truth = {}
    mouth_parts = set(rig.mouth_parts)
    for k, name in enumerate(mesh.part_names):
        if k in mouth_parts:
            continue
        truth[name] = "flexible" if spec.detail.get(name, 0.0) > spec.default_detail else "rigid"
    return ref, truth


def render_reference(rig, ref: SplatSet, params: RigParams, cam: Camera, background, drift=None, threads: int = 1):
    V = evaluate_vertices(rig, params)
    if rig.aug is not None:
        du, dl = drift_offsets(drift, params)
        V = offset_vertices(V, rig.aug, du, dl)
    R, C, S, qR = frames_for(V, rig.base.faces)
    g = transform_to_global(ref, R, C, S, qR)
    img, _ = render(g.means, g.quats, g.scales, g.colors, g.opacity_logit, cam, background, threads=threads)
    return img


def generate_scene(spec: SceneSpec, seed: int = 0, threads: int = 1, render_images: bool = True) -> Scene:
    """Deterministic scene from a spec and seed; ``render_images=False`` rebuilds everything but the frames."""
    spec.validate()
    rng = np.random.default_rng(seed)
    rig = build_rig(spec, rng)
    cam = make_camera(spec)
    params = frame_params(spec, rng)
    ref, truth = reference_splats(spec, rig, rng)
    drift = None
    if rig.aug is not None and spec.mouth_drift > 0:
        drift = rng.normal(0.0, 1.0, size=(2, 3, spec.psi_dim + spec.theta_dim))
        drift *= spec.mouth_drift / np.sqrt(spec.psi_dim + spec.theta_dim)
        # scale so typical inputs give offsets of about mouth_drift
        scale = np.array([spec.expr_amplitude] * spec.psi_dim + [max(spec.jaw_amplitude, 1e-3)] * spec.theta_dim)
        drift /= scale[None, None, :]
    images = [render_reference(rig, ref, p, cam, spec.background, drift, threads) for p in params] if render_images else []
    return Scene(spec, seed, rig, cam, params, images, ref, truth, drift)
