"""Offset regularisation, photometric loss and image metrics.

The regulariser penalises the radius of each local mean beyond a per-set
threshold and, once a splat has left the rigid radius, its polar angle from
the face normal beyond ``tau_phi``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatch, UnassignedFace, ValidationError
from .geometry import polar_batch, polar_gradients_batch

DIFFERENTIABLE = ("loss_p", "loss_angle", "loss_reg", "ssim", "loss_rgb")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class FaceSet(enum.IntEnum):
    RIGID = 0
    FLEXIBLE = 1
    MOUTH = 2


@dataclass
class RegThresholds:
    tau_r: float = 0.1
    tau_f: float = 2.0
    tau_m: float | None = None  # None means "same as tau_r"
    tau_phi: float = 0.78
    fold_phi: bool = True
    reduction: str = "sum"

    def __post_init__(self):
        if not 0 < self.tau_r < self.tau_f:
            raise ValidationError("need 0 < tau_r < tau_f")
        if not 0 < self.tau_phi <= np.pi / 2:
            raise ValidationError("tau_phi must lie in (0, pi/2]")
        if self.reduction not in ("sum", "mean"):
            raise ValidationError("reduction must be 'sum' or 'mean'")

    @property
    def mouth(self) -> float:
        return self.tau_r if self.tau_m is None else self.tau_m

    def tau_for(self, face_set) -> np.ndarray:
        table = np.array([self.tau_r, self.tau_f, self.mouth])
        return table[np.asarray(face_set)]


def loss_p(r: float, tau_p: float) -> float:
    return max(0.0, r - tau_p)


def loss_p_grad(r: float, tau_p: float) -> float:
    """Derivative in ``r``; zero at the kink."""
    return 1.0 if r > tau_p else 0.0


def _fold(phi):
    return np.minimum(phi, np.pi - phi)


def loss_angle(r: float, phi: float, th: RegThresholds) -> float:
    if r <= th.tau_r:
        return 0.0
    phi_eff = float(_fold(phi)) if th.fold_phi else phi
    return max(0.0, phi_eff - th.tau_phi)


@dataclass
class RegResult:
    value: float
    grad_mu: np.ndarray  # (N, 3)
    by_set: dict = field(default_factory=dict)
    angle: float = 0.0


def loss_reg(mu: np.ndarray, splat_sets: np.ndarray, th: RegThresholds) -> RegResult:
    """Regulariser over all splats.

    ``splat_sets`` holds the face set of each splat's bound face. Returns
    the (summed by default) loss and its gradient on every local mean.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    splat_sets = np.asarray(splat_sets)
    if len(splat_sets) != len(mu):
        raise ShapeMismatch("one face set per splat required")
    if len(splat_sets) and (splat_sets.min() < 0 or splat_sets.max() > 2):
        raise UnassignedFace("splat bound to a face without a valid set")
    tau = th.tau_for(splat_sets)
    r, phi = polar_batch(mu)
    dr, dphi, _, phi_ok = polar_gradients_batch(mu)

    lp = np.maximum(r - tau, 0.0)
    active_p = r > tau

    if th.fold_phi:
        phi_eff = _fold(phi)
        sign = np.where(phi > np.pi / 2, -1.0, 1.0)
    else:
        phi_eff = phi
        sign = np.ones_like(phi)
    gate = r > th.tau_r
    la = np.where(gate, np.maximum(phi_eff - th.tau_phi, 0.0), 0.0)
    active_a = gate & (phi_eff > th.tau_phi) & phi_ok

    grad = active_p[:, None] * dr + (active_a * sign)[:, None] * dphi
    scale = 1.0
    if th.reduction == "mean" and len(mu):
        scale = 1.0 / len(mu)
    # fixed-order reduction
    by_set = {s.name.lower(): float(np.sum(lp[splat_sets == s])) * scale for s in FaceSet}
    value = (float(np.sum(lp)) + float(np.sum(la))) * scale
    return RegResult(value, grad * scale, by_set, float(np.sum(la)) * scale)


# --- SSIM and photometric loss ---------------------------------------------


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    k = gaussian_kernel()
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim(x, y, return_grad: bool = False):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding.

    With ``return_grad`` also returns ``d ssim / d x``.
    """
    x, y = _check_pair(x, y)
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(np.mean(smap))
    if not return_grad:
        return value
    n = smap.size
    dA1 = A2 / (B1 * B2)
    dA2 = A1 / (B1 * B2)
    dB1 = -smap / B1
    dB2 = -smap / B2
    g_mx = (dA1 * 2 * my - dA2 * 2 * my + dB1 * 2 * mx - dB2 * 2 * mx) / n
    g_exx = dB2 / n
    g_exy = 2 * dA2 / n
    # the symmetric zero-padded blur is self-adjoint
    grad = _blur(g_mx) + 2 * x * _blur(g_exx) + y * _blur(g_exy)
    return value, grad


def ssim_reference(x, y) -> float:
    """Slow per-window SSIM used as an independent oracle."""
    x, y = _check_pair(x, y)
    H, W, Ch = x.shape
    half = SSIM_WINDOW // 2
    k = gaussian_kernel()
    w2 = np.outer(k, k)
    xp = np.pad(x, ((half, half), (half, half), (0, 0)))
    yp = np.pad(y, ((half, half), (half, half), (0, 0)))
    total = 0.0
    for c in range(Ch):
        for i in range(H):
            for j in range(W):
                px = xp[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW, c]
                py = yp[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW, c]
                mx = np.sum(w2 * px)
                my = np.sum(w2 * py)
                vx = np.sum(w2 * px * px) - mx * mx
                vy = np.sum(w2 * py * py) - my * my
                cxy = np.sum(w2 * px * py) - mx * my
                total += ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
                    (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
                )
    return total / (H * W * Ch)


@dataclass
class RgbLoss:
    value: float
    l1: float
    dssim: float
    grad: np.ndarray


def loss_rgb(rendered, target, lam: float = 0.2) -> RgbLoss:
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` and its gradient on ``rendered``."""
    x, y = _check_pair(rendered, target)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    s, ds = ssim(x, y, return_grad=True)
    dssim = (1.0 - s) / 2.0
    grad = (1 - lam) * np.sign(diff) / diff.size - lam * 0.5 * ds
    grad = grad.reshape(np.shape(rendered))
    return RgbLoss((1 - lam) * l1 + lam * dssim, l1, dssim, grad)


@dataclass
class Metrics:
    mse: float
    psnr: float
    ssim: float

    def line(self) -> str:
        return f"mse={self.mse:.10g} psnr={self.psnr:.6f} ssim={self.ssim:.10g}"


def psnr_from_mse(mse: float) -> float:
    return float("inf") if mse <= 0 else float(-10.0 * np.log10(mse))


def metrics(rendered, target) -> Metrics:
    x, y = _check_pair(rendered, target)
    mse = float(np.mean((x - y) ** 2))
    return Metrics(mse, psnr_from_mse(mse), ssim(x, y))


@dataclass
class LossReport:
    step: int
    l_rgb: float
    l1: float
    dssim: float
    l_reg: float
    l_p_by_set: dict
    l_angle: float
    total: float
    grad_norms: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def line(self) -> str:
        p = self.l_p_by_set
        return (
            f"step={self.step} total={self.total:.10g} l_rgb={self.l_rgb:.10g} l1={self.l1:.10g} "
            f"dssim={self.dssim:.10g} l_reg={self.l_reg:.10g} l_p_rigid={p.get('rigid', 0.0):.10g} "
            f"l_p_flexible={p.get('flexible', 0.0):.10g} l_p_mouth={p.get('mouth', 0.0):.10g} "
            f"l_angle={self.l_angle:.10g}"
        )
