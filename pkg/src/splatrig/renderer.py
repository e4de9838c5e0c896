"""CPU splat renderer with hand-written adjoints.

Pipeline: EWA projection of each 3D Gaussian to a 2D conic, depth sort,
front-to-back alpha compositing per 16x16 tile. The footprint of a splat is
truncated at a fixed Mahalanobis radius (``cutoff``, 3 by default); the
axis-aligned box around that ellipse is used only to assign splats to tiles,
so widening it never changes the image.

Per-tile work is independent, which is what ``threads`` parallelises; all
per-splat reductions are folded together afterwards in tile order so the
result does not depend on the thread count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NoForwardCache
from .geometry import quat_to_matrix, quat_to_matrix_vjp

DIFFERENTIABLE = ("project", "composite", "render")

TILE = 16
ALPHA_MAX = 0.99
DILATION = 0.3


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera rotation
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 1e-3

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height, cx=None, cy=None, near=1e-3):
        """Camera at ``eye`` looking at ``target``; image x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(up, dtype=np.float64))
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = np.stack([r, d, f])
        return cls(
            fx=float(fx),
            fy=float(fy if fy is not None else fx),
            cx=float(cx if cx is not None else (width - 1) / 2.0),
            cy=float(cy if cy is not None else (height - 1) / 2.0),
            width=int(width),
            height=int(height),
            R=R,
            t=-R @ eye,
            near=near,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(), "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool, False = behind the near plane (culled)
    conic: np.ndarray  # (N, 3) entries a, b, c of the inverse covariance
    cache: dict = field(default_factory=dict, repr=False)


def project(means: np.ndarray, quats: np.ndarray, scales: np.ndarray, cam: Camera) -> Projection:
    """Perspective projection of 3D Gaussians (mean + local Jacobian approximation)."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    W = cam.R
    pc = means @ W.T + cam.t
    z = pc[:, 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    Rq = quat_to_matrix(quats)
    M = Rq * scales[:, None, :]
    Sigma = M @ np.transpose(M, (0, 2, 1))
    T = J @ W
    cov2d = T @ Sigma @ np.transpose(T, (0, 2, 1)) + DILATION * np.eye(2)
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=1)
    cache = {"pc": pc, "zs": zs, "J": J, "Rq": Rq, "M": M, "Sigma": Sigma, "T": T, "quats": quats, "scales": scales}
    return Projection(mean2d, cov2d, np.where(valid, z, np.inf), valid, conic, cache)


def project_backward(proj: Projection, cam: Camera, d_mean2d: np.ndarray, d_conic: np.ndarray):
    """Adjoint of ``project``: returns ``(d_means, d_quats, d_scales)``."""
    c = proj.cache
    a, b, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    K = np.stack([np.stack([a, b], -1), np.stack([b, cc], -1)], -2)
    G = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2
    )
    d_cov = -K @ G @ K
    T, Sigma = c["T"], c["Sigma"]
    Tt = np.transpose(T, (0, 2, 1))
    d_T = d_cov @ T @ np.transpose(Sigma, (0, 2, 1)) + np.transpose(d_cov, (0, 2, 1)) @ T @ Sigma
    d_Sigma = Tt @ d_cov @ T
    W = cam.R
    d_J = d_T @ W.T
    pc, z = c["pc"], c["zs"]
    x, y = pc[:, 0], pc[:, 1]
    fx, fy = cam.fx, cam.fy
    du, dv = d_mean2d[:, 0], d_mean2d[:, 1]
    d_pc = np.empty_like(pc)
    d_pc[:, 0] = d_J[:, 0, 2] * (-fx / z**2) + du * fx / z
    d_pc[:, 1] = d_J[:, 1, 2] * (-fy / z**2) + dv * fy / z
    d_pc[:, 2] = (
        d_J[:, 0, 0] * (-fx / z**2)
        + d_J[:, 0, 2] * (2 * fx * x / z**3)
        + d_J[:, 1, 1] * (-fy / z**2)
        + d_J[:, 1, 2] * (2 * fy * y / z**3)
        - du * fx * x / z**2
        - dv * fy * y / z**2
    )
    invalid = ~proj.valid
    d_pc[invalid] = 0.0
    d_means = d_pc @ W
    M = c["M"]
    d_M = (d_Sigma + np.transpose(d_Sigma, (0, 2, 1))) @ M
    d_M[invalid] = 0.0
    scales = c["scales"]
    d_Rq = d_M * scales[:, None, :]
    d_scales = np.sum(d_M * c["Rq"], axis=1)
    d_quats = quat_to_matrix_vjp(c["quats"], d_Rq)
    return d_means, d_quats, d_scales


def _tile_grid(cam: Camera):
    nty = (cam.height + TILE - 1) // TILE
    ntx = (cam.width + TILE - 1) // TILE
    return ntx, nty


@dataclass
class RenderCache:
    proj: Projection
    cam: Camera
    order: np.ndarray  # depth-sorted indices of valid splats
    colors: np.ndarray
    opacity_logit: np.ndarray
    background: np.ndarray
    cutoff: float
    threads: int
    tiles: list = field(default_factory=list)


def _tile_pixels(cam: Camera, tx: int, ty: int):
    x0, y0 = tx * TILE, ty * TILE
    x1, y1 = min(x0 + TILE, cam.width), min(y0 + TILE, cam.height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (x0, x1, y0, y1), xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def _forward_tile(args):
    (bounds, px, py), idx, mean2d, conic, op_sig, colors, background, cutoff = args
    n = len(idx)
    P = len(px)
    if n == 0:
        img = np.broadcast_to(background, (P, 3)).copy()
        return img, None
    m = mean2d[idx]
    k = conic[idx]
    dx = px[None, :] - m[:, 0:1]
    dy = py[None, :] - m[:, 1:2]
    power = -0.5 * (k[:, 0:1] * dx * dx + k[:, 2:3] * dy * dy) - k[:, 1:2] * dx * dy
    inside = power >= -0.5 * cutoff * cutoff
    g = np.where(inside, np.exp(np.where(inside, power, 0.0)), 0.0)
    raw = op_sig[idx][:, None] * g
    clamped = raw > ALPHA_MAX
    w = np.where(clamped, ALPHA_MAX, raw)
    one_minus = 1.0 - w
    trans = np.cumprod(one_minus, axis=0)
    T = np.empty_like(w)
    T[0] = 1.0
    T[1:] = trans[:-1]
    T_final = trans[-1]
    wT = w * T
    img = wT.T @ colors[idx] + T_final[:, None] * background[None, :]
    saved = {"dx": dx, "dy": dy, "g": g, "raw": raw, "clamped": clamped, "w": w, "T": T, "T_final": T_final, "wT": wT}
    return img, saved


def composite(
    proj: Projection,
    colors: np.ndarray,
    opacity_logit: np.ndarray,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    cutoff: float = 3.0,
    threads: int = 1,
):
    """Front-to-back alpha compositing. Returns ``(image (H, W, 3), RenderCache)``."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    opacity_logit = np.asarray(opacity_logit, dtype=np.float64).reshape(-1)
    background = np.asarray(background, dtype=np.float64).reshape(3)
    valid_idx = np.flatnonzero(proj.valid)
    order = valid_idx[np.argsort(proj.depth[valid_idx], kind="stable")]
    op_sig = 1.0 / (1.0 + np.exp(-opacity_logit))

    ntx, nty = _tile_grid(cam)
    m = proj.mean2d[order]
    rx = cutoff * np.sqrt(proj.cov2d[order, 0, 0])
    ry = cutoff * np.sqrt(proj.cov2d[order, 1, 1])
    # inclusive pixel range covered by the ellipse's bounding box
    px0 = np.ceil(m[:, 0] - rx)
    px1 = np.floor(m[:, 0] + rx)
    py0 = np.ceil(m[:, 1] - ry)
    py1 = np.floor(m[:, 1] + ry)
    on_screen = (px1 >= 0) & (px0 <= cam.width - 1) & (py1 >= 0) & (py0 <= cam.height - 1) & (px0 <= px1) & (py0 <= py1)
    tx0 = np.floor(np.clip(px0, 0, cam.width - 1) / TILE)
    tx1 = np.floor(np.clip(px1, 0, cam.width - 1) / TILE)
    ty0 = np.floor(np.clip(py0, 0, cam.height - 1) / TILE)
    ty1 = np.floor(np.clip(py1, 0, cam.height - 1) / TILE)

    jobs = []
    for ty in range(nty):
        for tx in range(ntx):
            sel = on_screen & (tx0 <= tx) & (tx1 >= tx) & (ty0 <= ty) & (ty1 >= ty)
            jobs.append((_tile_pixels(cam, tx, ty), order[sel], proj.mean2d, proj.conic, op_sig, colors, background, cutoff))

    results = _run(_forward_tile, jobs, threads)
    image = np.empty((cam.height, cam.width, 3))
    tiles = []
    for job, (img, saved) in zip(jobs, results):
        (x0, x1, y0, y1), _, _ = job[0]
        image[y0:y1, x0:x1] = img.reshape(y1 - y0, x1 - x0, 3)
        tiles.append((job[0][0], job[1], saved))
    cache = RenderCache(proj, cam, order, colors, opacity_logit, background, cutoff, threads, tiles)
    return image, cache


def _run(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def _backward_tile(args):
    bounds, idx, saved, d_img, colors, background, conic, op_sig = args
    if saved is None or len(idx) == 0:
        return None
    w, T, wT, g, raw = saved["w"], saved["T"], saved["wT"], saved["g"], saved["raw"]
    cols = colors[idx]
    a = cols @ d_img.T  # (n, P)
    d_color = wT @ d_img
    contrib = wT * a
    suffix = np.zeros_like(contrib)
    if len(idx) > 1:
        suffix[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1][1:]
    suffix += saved["T_final"][None, :] * (d_img @ background)[None, :]
    d_w = T * a - suffix / (1.0 - w)
    d_raw = np.where(saved["clamped"], 0.0, d_w)
    s = op_sig[idx]
    d_opacity = np.sum(d_raw * g, axis=1) * s * (1.0 - s)
    d_power = d_raw * raw
    dx, dy = saved["dx"], saved["dy"]
    k = conic[idx]
    d_conic = np.stack(
        [np.sum(-0.5 * dx * dx * d_power, 1), np.sum(-dx * dy * d_power, 1), np.sum(-0.5 * dy * dy * d_power, 1)], axis=1
    )
    d_mean2d = np.stack(
        [np.sum((k[:, 0:1] * dx + k[:, 1:2] * dy) * d_power, 1), np.sum((k[:, 1:2] * dx + k[:, 2:3] * dy) * d_power, 1)],
        axis=1,
    )
    return idx, d_color, d_opacity, d_conic, d_mean2d


@dataclass
class RenderGrads:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacity_logit: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray


def composite_backward(cache: RenderCache, d_image: np.ndarray):
    """Adjoint of ``composite``: gradients on colours, opacity logits, 2D means and conics."""
    if cache is None:
        raise NoForwardCache("composite_backward needs the cache returned by composite")
    cam = cache.cam
    d_image = np.asarray(d_image, dtype=np.float64)
    op_sig = 1.0 / (1.0 + np.exp(-cache.opacity_logit))
    jobs = []
    for (x0, x1, y0, y1), idx, saved in cache.tiles:
        d_img = d_image[y0:y1, x0:x1].reshape(-1, 3)
        jobs.append(((x0, x1, y0, y1), idx, saved, d_img, cache.colors, cache.background, cache.proj.conic, op_sig))
    results = _run(_backward_tile, jobs, cache.threads)
    n = len(cache.colors)
    d_color = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_conic = np.zeros((n, 3))
    d_mean2d = np.zeros((n, 2))
    for res in results:  # fixed tile order keeps the sums reproducible
        if res is None:
            continue
        idx, dc, do, dk, dm = res
        np.add.at(d_color, idx, dc)
        np.add.at(d_opacity, idx, do)
        np.add.at(d_conic, idx, dk)
        np.add.at(d_mean2d, idx, dm)
    return d_color, d_opacity, d_mean2d, d_conic


def render(means, quats, scales, colors, opacity_logit, cam: Camera, background=(0.0, 0.0, 0.0), cutoff=3.0, threads=1):
    proj = project(means, quats, scales, cam)
    return composite(proj, colors, opacity_logit, cam, background, cutoff, threads)


def render_backward(cache: RenderCache, d_image: np.ndarray) -> RenderGrads:
    d_color, d_opacity, d_mean2d, d_conic = composite_backward(cache, d_image)
    d_means, d_quats, d_scales = project_backward(cache.proj, cache.cam, d_mean2d, d_conic)
    return RenderGrads(d_means, d_quats, d_scales, d_color, d_opacity, d_mean2d, d_conic)
