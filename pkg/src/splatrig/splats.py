"""Gaussian attributes bound to mesh faces, the local-to-global transform,
and adaptive density control that keeps children on their parent's face."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import FaceFrame, TriMesh, face_frames, matrix_to_quat, quat_left_matrix, quat_mul, quat_to_matrix

DIFFERENTIABLE = ("to_global",)

LOG_SCALE_MIN = np.log(1e-8)
LOG_SCALE_MAX = np.log(1e3)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class Splat:
    mu_local: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity_logit: float


@dataclass
class SplatSet:
    """Structure-of-arrays storage; ``binding[j]`` is the face splat ``j`` rides on."""

    mu: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4)
    log_scale: np.ndarray  # (N, 3)
    color: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    binding: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(-1, 3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(-1)
        self.binding = np.asarray(self.binding, dtype=np.int64).reshape(-1)
        n = len(self.mu)
        for name in ("rot", "log_scale", "color", "opacity_logit", "binding"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    PARAMS = ("mu", "rot", "log_scale", "color", "opacity_logit")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, j: int) -> Splat:
        return Splat(
            self.mu[j].copy(), self.rot[j].copy(), self.log_scale[j].copy(), self.color[j].copy(), float(self.opacity_logit[j])
        )

    def copy(self) -> "SplatSet":
        return SplatSet(*(getattr(self, k).copy() for k in self.PARAMS), self.binding.copy())

    def take(self, index: np.ndarray) -> "SplatSet":
        return SplatSet(*(getattr(self, k)[index] for k in self.PARAMS), self.binding[index])

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def bound_to(self, n_faces: int) -> list[np.ndarray]:
        """Inverted index: splat ids bound to each face (``G_i``)."""
        order = np.argsort(self.binding, kind="stable")
        counts = np.bincount(self.binding, minlength=n_faces)
        return np.split(order, np.cumsum(counts)[:-1])

    def counts_per_face(self, n_faces: int) -> np.ndarray:
        return np.bincount(self.binding, minlength=n_faces)

    def validate(self, n_faces: int) -> None:
        if len(self) and (self.binding.min() < 0 or self.binding.max() >= n_faces):
            raise ValueError("binding references a face outside the mesh")

    def normalize_rotations(self) -> None:
        self.rot /= np.linalg.norm(self.rot, axis=1, keepdims=True)


def initialize_on_mesh(mesh: TriMesh, per_face: int = 1) -> SplatSet:
    if per_face < 1:
        raise ValueError("per_face must be >= 1")
    n = mesh.n_faces * per_face
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatSet(
        mu=np.zeros((n, 3)),
        rot=rot,
        log_scale=np.full((n, 3), np.log(0.5)),
        color=np.full((n, 3), 0.5),
        opacity_logit=np.full(n, logit(0.1)),
        binding=np.repeat(np.arange(mesh.n_faces), per_face),
    )


def to_global(splat: Splat, frame: FaceFrame):
    """Single-splat local-to-global transform: ``(mean, rotation, scale)``."""
    mean = frame.scale * frame.rotation @ splat.mu_local + frame.center
    scale = frame.scale * np.exp(splat.log_scale)
    q = quat_mul(matrix_to_quat(frame.rotation), splat.rot)
    return mean, q / np.linalg.norm(q), scale


@dataclass
class GlobalSplats:
    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) unit
    scales: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    cache: dict = field(default_factory=dict, repr=False)


def frames_for(mesh_vertices: np.ndarray, faces: np.ndarray):
    R, C, S = face_frames(mesh_vertices, faces)
    return R, C, S, matrix_to_quat(R)


def transform_to_global(splats: SplatSet, R: np.ndarray, C: np.ndarray, S: np.ndarray, qR: np.ndarray | None = None):
    """Batched local-to-global transform of every splat through its bound face frame."""
    b = splats.binding
    Rb, Sb = R[b], S[b]
    if qR is None:
        qR = matrix_to_quat(R)
    means = Sb[:, None] * np.einsum("nij,nj->ni", Rb, splats.mu) + C[b]
    exp_s = np.exp(splats.log_scale)
    scales = Sb[:, None] * exp_s
    Lq = quat_left_matrix(qR[b])
    p = np.einsum("nij,nj->ni", Lq, splats.rot)
    pn = np.linalg.norm(p, axis=1)
    quats = p / pn[:, None]
    cache = {"Rb": Rb, "Sb": Sb, "Lq": Lq, "pn": pn, "exp_s": exp_s}
    return GlobalSplats(means, quats, scales, splats.color, splats.opacity_logit, cache)


def transform_to_global_backward(g: GlobalSplats, d_means, d_quats, d_scales):
    """Adjoint of ``transform_to_global``.

    Returns gradients for ``mu``, ``rot``, ``log_scale`` and the per-splat
    gradient on the frame centre (equal to ``d_means``).
    """
    c = g.cache
    d_mu = c["Sb"][:, None] * np.einsum("nji,nj->ni", c["Rb"], d_means)
    d_log_scale = d_scales * g.scales
    q = g.quats
    d_p = (d_quats - np.sum(d_quats * q, axis=1, keepdims=True) * q) / c["pn"][:, None]
    d_rot = np.einsum("nji,nj->ni", c["Lq"], d_p)
    return d_mu, d_rot, d_log_scale, d_means


# --- adaptive density control ----------------------------------------------


@dataclass
class DensifyOptions:
    grad_threshold: float = 2e-4
    # local-units scale separating clone (small) from split (large)
    scale_threshold: float = 0.6
    split_factor: float = 1.6
    prune_opacity: float = 5e-3
    max_splats: int = 200_000


@dataclass
class DensifyReport:
    cloned: int
    split: int
    pruned: int
    empty_faces: list[int]
    # source index for every output splat, and whether it is a new child
    parent: np.ndarray
    is_new: np.ndarray


def densify_and_prune(
    splats: SplatSet,
    grad_norms: np.ndarray,
    opts: DensifyOptions | None = None,
    rng: np.random.Generator | None = None,
    n_faces: int | None = None,
) -> tuple[SplatSet, DensifyReport]:
    """Clone/split splats with large positional gradients, then prune transparent ones.

    Children always inherit the parent's binding face. Split children are
    jittered inside the parent's footprint (in local units) and shrunk by
    ``split_factor``; the parent is replaced, so a split also adds one splat.
    """
    opts = opts or DensifyOptions()
    rng = rng or np.random.default_rng(0)
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if len(grad_norms) != len(splats):
        raise ValueError("grad_norms must align with splats")
    n = len(splats)
    hot = grad_norms > opts.grad_threshold
    room = max(opts.max_splats - n, 0)
    if hot.sum() > room:
        hot_idx = np.flatnonzero(hot)
        order = np.argsort(-grad_norms[hot_idx], kind="stable")
        hot = np.zeros(n, bool)
        hot[hot_idx[order[:room]]] = True
    big = np.exp(splats.log_scale).max(axis=1) > opts.scale_threshold
    clone = hot & ~big
    split = hot & big

    parts = [splats]
    parent = [np.arange(n)]
    is_new = [np.zeros(n, bool)]
    if clone.any():
        idx = np.flatnonzero(clone)
        parts.append(splats.take(idx))
        parent.append(idx)
        is_new.append(np.ones(len(idx), bool))
    if split.any():
        idx = np.flatnonzero(split)
        Rl = quat_to_matrix(splats.rot[idx] / np.linalg.norm(splats.rot[idx], axis=1, keepdims=True))
        std = np.exp(splats.log_scale[idx])
        children = []
        for _ in range(2):
            child = splats.take(idx)
            jitter = rng.normal(size=(len(idx), 3)) * std
            child.mu = child.mu + np.einsum("nij,nj->ni", Rl, jitter)
            child.log_scale = child.log_scale - np.log(opts.split_factor)
            children.append(child)
        # first child overwrites the parent in place, second is appended
        base = parts[0].copy()
        for k in SplatSet.PARAMS:
            getattr(base, k)[idx] = getattr(children[0], k)
        parts[0] = base
        is_new[0] = is_new[0].copy()
        is_new[0][idx] = True
        parts.append(children[1])
        parent.append(idx)
        is_new.append(np.ones(len(idx), bool))

    merged = SplatSet(
        *(np.concatenate([getattr(p, k) for p in parts]) for k in SplatSet.PARAMS),
        np.concatenate([p.binding for p in parts]),
    )
    parent_arr = np.concatenate(parent)
    new_arr = np.concatenate(is_new)
    keep = sigmoid(merged.opacity_logit) >= opts.prune_opacity
    out = merged.take(np.flatnonzero(keep))
    nf = n_faces if n_faces is not None else int(splats.binding.max()) + 1 if n else 0
    before = splats.counts_per_face(nf) > 0
    after = out.counts_per_face(nf) > 0
    empty = np.flatnonzero(before & ~after).tolist()
    report = DensifyReport(
        cloned=int(clone.sum()),
        split=int(split.sum()),
        pruned=int((~keep).sum()),
        empty_faces=empty,
        parent=parent_arr[keep],
        is_new=new_arr[keep],
    )
    return out, report
