"""Part-wise mouth deformation: a small MLP mapping animation parameters and an
encoded timestep to one 3D offset shared by every vertex of a mouth part."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoForwardCache

DIFFERENTIABLE = ("deform_mlp",)


@dataclass(frozen=True)
class PosEncoding:
    num_freqs: int = 6
    include_input: bool = True

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValueError("num_freqs must be >= 0")

    @property
    def dim(self) -> int:
        return int(self.include_input) + 2 * self.num_freqs


def encode_timestep(T: float, enc: PosEncoding) -> np.ndarray:
    if not np.isfinite(T):
        raise ValueError("timestep must be finite")
    out = [T] if enc.include_input else []
    for k in range(enc.num_freqs):
        a = (2.0**k) * np.pi * T
        out += [np.sin(a), np.cos(a)]
    return np.asarray(out, dtype=np.float64)


@dataclass
class DeformMLP:
    """Dense tanh network; the output layer starts at zero so the mesh starts undeformed."""

    psi_dim: int
    theta_dim: int
    enc: PosEncoding = field(default_factory=PosEncoding)
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    _cache: dict | None = field(default=None, repr=False)

    @classmethod
    def create(cls, psi_dim: int, theta_dim: int, hidden=(64, 64, 64), enc: PosEncoding | None = None, rng=None):
        enc = enc or PosEncoding()
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [psi_dim + theta_dim + enc.dim, *hidden, 3]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if i == len(widths) - 2:
                weights.append(np.zeros((b, a)))
            else:
                weights.append(rng.normal(0.0, np.sqrt(1.0 / a), size=(b, a)))
            biases.append(np.zeros(b))
        return cls(psi_dim, theta_dim, enc, weights, biases)

    @property
    def in_dim(self) -> int:
        return self.psi_dim + self.theta_dim + self.enc.dim

    def inputs(self, psi, theta, T: float) -> np.ndarray:
        psi = np.asarray(psi, dtype=np.float64).reshape(-1)
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if len(psi) != self.psi_dim or len(theta) != self.theta_dim:
            raise DimensionMismatch(
                f"expected psi[{self.psi_dim}] and theta[{self.theta_dim}], got psi[{len(psi)}] and theta[{len(theta)}]"
            )
        return np.concatenate([psi, theta, encode_timestep(T, self.enc)])

    def forward(self, psi, theta, T: float, inference: bool = False) -> np.ndarray:
        """Offset for one part. At inference the timestep is pinned to 0."""
        x = self.inputs(psi, theta, 0.0 if inference else T)
        return self.forward_raw(x)

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        acts = [x]
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = W @ h + b
            if i < len(self.weights) - 1:
                h = np.tanh(h)
            acts.append(h)
        self._cache = {"acts": acts}
        return h.copy()

    def backward(self, upstream) -> tuple[dict, np.ndarray]:
        """Gradients for every weight/bias (``{"W0": ..., "b0": ...}``) and the input vector."""
        if self._cache is None:
            raise NoForwardCache("call forward before backward")
        acts = self._cache["acts"]
        g = np.asarray(upstream, dtype=np.float64).reshape(3)
        grads = {}
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] = np.outer(g, acts[i])
            grads[f"b{i}"] = g.copy()
            g = self.weights[i].T @ g
        self._cache = None
        return grads, g

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def copy(self) -> "DeformMLP":
        return DeformMLP(
            self.psi_dim, self.theta_dim, self.enc, [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )
