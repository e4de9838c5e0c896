"""Adaptive pre-allocation: split non-mouth parts into rigid and flexible sets
from the mean local-offset magnitude of their splats."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AlreadyRan, EmptyPart, TooFewParts, ValidationError
from .geometry import TriMesh
from .losses import FaceSet
from .splats import SplatSet

log = logging.getLogger(__name__)


@dataclass
class FaceSetAssignment:
    part_set: np.ndarray  # (n_parts,) FaceSet values
    set_of_face: np.ndarray  # (F,) FaceSet values
    distances: np.ndarray | None = None  # per part; NaN for mouth parts
    tau_part: float | None = None

    @classmethod
    def initial(cls, part_of_face: np.ndarray, mouth_parts=()) -> "FaceSetAssignment":
        """Warm-up assignment: everything rigid except the mouth."""
        part_of_face = np.asarray(part_of_face)
        n_parts = int(part_of_face.max()) + 1
        part_set = np.full(n_parts, int(FaceSet.RIGID))
        part_set[list(mouth_parts)] = int(FaceSet.MOUTH)
        return cls(part_set, part_set[part_of_face])

    def splat_sets(self, binding: np.ndarray) -> np.ndarray:
        return self.set_of_face[binding]

    def lines(self, part_names=None) -> list[str]:
        names = part_names or [f"part{k}" for k in range(len(self.part_set))]
        out = []
        for k, s in enumerate(self.part_set):
            d = "nan" if self.distances is None or np.isnan(self.distances[k]) else f"{self.distances[k]:.10g}"
            out.append(f"part={names[k]} id={k} distance={d} set={FaceSet(s).name}")
        if self.tau_part is not None:
            out.append(f"tau_part={self.tau_part:.10g}")
        return out


def part_distance(splats: SplatSet, mesh: TriMesh, part_k: int) -> float:
    """Mean over the part's faces of the mean local-offset norm of the splats on that face.

    Faces with no bound splats contribute zero.
    """
    faces = mesh.faces_of_part(part_k)
    if len(faces) == 0:
        raise EmptyPart(f"part {part_k} has no faces")
    return float(_all_part_distances(splats, mesh.part_of_face, mesh.n_faces, [part_k])[part_k])


def _all_part_distances(splats: SplatSet, part_of_face, n_faces: int, parts) -> dict:
    norms = np.linalg.norm(splats.mu, axis=1)
    sums = np.bincount(splats.binding, weights=norms, minlength=n_faces)
    counts = np.bincount(splats.binding, minlength=n_faces)
    per_face = np.divide(sums, counts, out=np.zeros(n_faces), where=counts > 0)
    out = {}
    for k in parts:
        faces = np.flatnonzero(part_of_face == k)
        if len(faces) == 0:
            raise EmptyPart(f"part {k} has no faces")
        empty = int(np.sum(counts[faces] == 0))
        if empty:
            log.warning("part %d: %d faces without splats count as zero distance", k, empty)
        out[k] = float(np.sum(per_face[faces]) / len(faces))
    return out


def assign_sets(distances, mouth_parts=(), part_of_face=None) -> FaceSetAssignment:
    """Threshold per-part distances at their mean over non-mouth parts.

    Strictly below the mean is rigid, strictly above is flexible, exact ties
    go rigid.
    """
    d = np.asarray(distances, dtype=np.float64).copy()
    mouth = set(int(k) for k in mouth_parts)
    others = [k for k in range(len(d)) if k not in mouth]
    if len(others) < 2:
        raise TooFewParts("need at least two non-mouth parts")
    tau = float(np.mean(d[others]))
    part_set = np.empty(len(d), dtype=np.int64)
    for k in range(len(d)):
        if k in mouth:
            part_set[k] = FaceSet.MOUTH
        elif d[k] > tau:
            part_set[k] = FaceSet.FLEXIBLE
        else:
            part_set[k] = FaceSet.RIGID
    for k in mouth:
        d[k] = np.nan
    set_of_face = part_set[np.asarray(part_of_face)] if part_of_face is not None else np.zeros(0, dtype=np.int64)
    return FaceSetAssignment(part_set, set_of_face, d, tau)


@dataclass
class ApsEvent:
    step: int
    assignment: FaceSetAssignment
    counts: dict = field(default_factory=dict)
    lines: list = field(default_factory=list)


def gaussian_count_report(splats: SplatSet, assignment: FaceSetAssignment) -> dict:
    """Splat counts per face set (in thousands, like the usual per-dataset tables)."""
    sets = assignment.splat_sets(splats.binding)
    counts = {s.name.lower(): int(np.sum(sets == s)) for s in FaceSet}
    counts["total"] = len(splats)
    return counts


def run_aps(state, mesh: TriMesh, mouth_parts=()) -> ApsEvent:
    """One-shot APS on a trainer state at its scheduled step.

    ``state`` needs ``splats``, ``step``, ``aps_step``, ``aps_done`` and
    ``assignment``; the assignment is replaced in place.
    """
    if state.aps_done:
        raise AlreadyRan("APS already ran for this state")
    if state.step != state.aps_step:
        raise ValidationError(f"APS is scheduled at step {state.aps_step}, state is at step {state.step}")
    non_mouth = [k for k in range(mesh.n_parts) if k not in set(mouth_parts)]
    dist = _all_part_distances(state.splats, mesh.part_of_face, mesh.n_faces, range(mesh.n_parts))
    d = np.array([dist[k] for k in range(mesh.n_parts)])
    if len(non_mouth) < 2:
        raise TooFewParts("need at least two non-mouth parts")
    assignment = assign_sets(d, mouth_parts, mesh.part_of_face)
    state.assignment = assignment
    state.aps_done = True
    counts = gaussian_count_report(state.splats, assignment)
    lines = [f"aps step={state.step}"] + assignment.lines(mesh.part_names)
    lines.append(
        "gaussians_k " + " ".join(f"{k}={v / 1000:.3f}" for k, v in counts.items())
    )
    for line in lines:
        log.info(line)
    return ApsEvent(state.step, assignment, counts, lines)
