"""Uniform adjoint interface for the differentiable operations and a
central-difference checker.

A ``DiffOp`` maps a dict of named input arrays to one output array and, given
an upstream gradient of the output's shape, returns a gradient for every
input. ``check_gradients`` contracts the output with a random upstream
vector and compares the adjoint against central differences, one input
coordinate at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import deform, geometry, losses, renderer, splats
from .deform import DeformMLP, PosEncoding
from .errors import NoForwardCache, SampledAtKink
from .geometry import face_frames, matrix_to_quat, polar_batch, polar_gradients_batch
from .losses import FaceSet, RegThresholds, loss_reg, loss_rgb, ssim
from .renderer import ALPHA_MAX, Camera, Projection, composite, composite_backward, project, project_backward, render
from .renderer import render_backward
from .splats import SplatSet, transform_to_global, transform_to_global_backward

# exclusion margins around non-differentiable sets
KINK_MARGIN = 1e-3
POLE_MARGIN = 0.999
# render kinks are measured in the exponent / alpha domain
RENDER_MARGIN = 1e-3


@dataclass
class DiffOp:
    """One differentiable operation.

    ``fwd(inputs) -> (output, cache)``; ``bwd(cache, upstream) -> grads``.
    ``kinks(inputs)`` raises SampledAtKink when inputs sit too close to a
    non-differentiable set.
    """

    name: str
    fwd: Callable
    bwd: Callable
    kinks: Callable | None = None
    h: float = 1e-5
    _cache: object = field(default=None, repr=False)
    _has_cache: bool = field(default=False, repr=False)

    def forward(self, inputs: dict) -> np.ndarray:
        out, self._cache = self.fwd(inputs)
        self._has_cache = True
        return np.asarray(out, dtype=np.float64)

    def backward(self, upstream) -> dict:
        if not self._has_cache:
            raise NoForwardCache(f"{self.name}: backward called without a live forward cache")
        grads = self.bwd(self._cache, np.asarray(upstream, dtype=np.float64))
        self._cache, self._has_cache = None, False
        return grads

    def value(self, inputs: dict) -> np.ndarray:
        out, _ = self.fwd(inputs)
        return np.asarray(out, dtype=np.float64)

    def check_inputs(self, inputs: dict) -> None:
        if self.kinks is not None:
            self.kinks(inputs)


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    input_name: str
    index: tuple
    analytic: float
    numeric: float
    trials: int

    def line(self) -> str:
        return (
            f"op={self.op} trials={self.trials} max_rel_error={self.max_rel_error:.3e} "
            f"worst={self.input_name}{list(self.index)} analytic={self.analytic:.10g} numeric={self.numeric:.10g}"
        )


def relative_error(a: np.ndarray, n: np.ndarray, rel_floor: float = 1e-4, abs_floor: float = 1e-12) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``rel_floor`` times the largest numeric component, so entries
    many orders below the gradient's scale are judged on absolute terms.
    """
    scale = max(float(np.max(np.abs(n))) if n.size else 0.0, abs_floor)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), rel_floor * scale)
    return np.abs(a - n) / den


def check_gradients(op: DiffOp, sampler: Callable, trials: int = 100, h: float | None = None, seed: int = 0,
                    rel_floor: float = 1e-4) -> GradReport:
    """Max relative error of ``op``'s adjoint against central differences.

    ``h`` defaults to the op's own step (``op.h``).
    """
    h = op.h if h is None else h
    rng = np.random.default_rng(seed)
    worst = GradReport(op.name, 0.0, "", (), 0.0, 0.0, trials)
    for _ in range(trials):
        inputs = sampler(rng)
        op.check_inputs(inputs)
        out = op.forward(inputs)
        w = rng.normal(size=out.shape)
        grads = op.backward(w)
        for name, x in inputs.items():
            if name not in grads:
                continue
            x = np.asarray(x, dtype=np.float64)
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != x.shape:
                raise ValueError(f"{op.name}: gradient for {name} has shape {g.shape}, input has {x.shape}")
            num = np.empty_like(x)
            for i in np.ndindex(*x.shape):
                xp = x.copy()
                xp[i] += h
                xm = x.copy()
                xm[i] -= h
                fp = np.sum(w * op.value({**inputs, name: xp}))
                fm = np.sum(w * op.value({**inputs, name: xm}))
                num[i] = (fp - fm) / (2 * h)
            err = relative_error(g, num, rel_floor)
            j = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
            if err.size and err[j] > worst.max_rel_error:
                worst = GradReport(op.name, float(err[j]), name, tuple(int(t) for t in j), float(g[j]), float(num[j]), trials)
    return worst


# --- samplers and exclusion checks ---------------------------------------------


def _polar_kinks(mu, th: RegThresholds | None = None, tau=None):
    r, phi = polar_batch(mu)
    if np.any(r < KINK_MARGIN):
        raise SampledAtKink("local mean too close to the origin")
    if np.any(np.abs(mu[:, 2] / r) >= POLE_MARGIN):
        raise SampledAtKink("local mean too close to a polar pole")
    if th is None:
        return
    if np.any(np.abs(r - tau) <= KINK_MARGIN) or np.any(np.abs(r - th.tau_r) <= KINK_MARGIN):
        raise SampledAtKink("radius within margin of a threshold")
    phi_eff = np.minimum(phi, np.pi - phi) if th.fold_phi else phi
    if np.any(np.abs(phi_eff - th.tau_phi) <= KINK_MARGIN) or (th.fold_phi and np.any(np.abs(phi - np.pi / 2) <= KINK_MARGIN)):
        raise SampledAtKink("angle within margin of its threshold or fold")


def _sample_mu(rng, n: int, th: RegThresholds | None = None, sets=None, max_tries: int = 10_000):
    """Local means away from every exclusion zone (rejection sampling per row)."""
    out = np.empty((n, 3))
    for i in range(n):
        for _ in range(max_tries):
            v = rng.normal(size=3) * rng.choice([0.05, 0.3, 1.5])
            try:
                tau = None if th is None else th.tau_for(np.array([sets[i]]))
                _polar_kinks(v[None, :], th, tau)
            except SampledAtKink:
                continue
            out[i] = v
            break
        else:
            raise SampledAtKink("could not sample away from the kinks")
    return out


def _tiny_camera(size: int = 16) -> Camera:
    return Camera.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), fx=1.2 * size, width=size, height=size)


def _render_kinks(mean2d, conic, opacity_logit, cam: Camera, cutoff: float, valid=None):
    """Reject scenes where some pixel sits on the footprint cutoff or on the alpha clamp."""
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    px, py = xs.ravel().astype(float), ys.ravel().astype(float)
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    power = -0.5 * (conic[:, 0:1] * dx * dx + conic[:, 2:3] * dy * dy) - conic[:, 1:2] * dx * dy
    if valid is not None:
        power = power[valid]
        opacity_logit = opacity_logit[valid]
    if np.any(np.abs(power + 0.5 * cutoff * cutoff) <= RENDER_MARGIN):
        raise SampledAtKink("pixel on a footprint cutoff")
    raw = (1.0 / (1.0 + np.exp(-opacity_logit)))[:, None] * np.exp(power)
    if np.any(np.abs(raw - ALPHA_MAX) <= RENDER_MARGIN):
        raise SampledAtKink("pixel on the alpha clamp")


def _sample_scene(rng, n: int = 5):
    means = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), rng.uniform(-0.3, 0.3, n)])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.06, 0.2, size=(n, 3))
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    opacity = rng.uniform(-2.0, 3.0, size=n)
    return {"means": means, "quats": quats, "scales": scales, "colors": colors, "opacity_logit": opacity}


def _retry(sampler, check):
    def wrapped(rng):
        for _ in range(1000):
            x = sampler(rng)
            try:
                check(x)
            except SampledAtKink:
                continue
            return x
        raise SampledAtKink("sampler kept landing on a kink")

    return wrapped


# --- operations ----------------------------------------------------------------


def _op_polar():
    def fwd(x):
        r, phi = polar_batch(x["mu"])
        dr, dphi, _, _ = polar_gradients_batch(x["mu"])
        return np.column_stack([r, phi]), (dr, dphi)

    def bwd(c, up):
        dr, dphi = c
        return {"mu": up[:, 0:1] * dr + up[:, 1:2] * dphi}

    return DiffOp("polar", fwd, bwd, lambda x: _polar_kinks(x["mu"])), lambda rng: {"mu": _sample_mu(rng, 6)}


def _op_loss_p():
    tau = 0.1

    def fwd(x):
        r = x["r"]
        return np.maximum(r - tau, 0.0), r > tau

    def bwd(active, up):
        return {"r": up * active}

    def kinks(x):
        if np.any(np.abs(x["r"] - tau) <= KINK_MARGIN):
            raise SampledAtKink("r at the threshold")

    sampler = _retry(lambda rng: {"r": rng.uniform(0.0, 0.3, 8)}, kinks)
    return DiffOp("loss_p", fwd, bwd, kinks), sampler


def _op_loss_angle():
    th = RegThresholds(tau_r=0.1, tau_f=2.0, tau_m=0.1)
    sets = np.full(6, int(FaceSet.FLEXIBLE))

    # radii are kept below the flexible threshold so only the angle term is live
    def fwd(x):
        res = loss_reg(x["mu"], sets, th)
        return np.array(res.angle), res.grad_mu

    def bwd(g, up):
        return {"mu": up * g}

    def kinks(x):
        _polar_kinks(x["mu"], th, th.tau_for(sets))

    def sampler(rng):
        mu = _sample_mu(rng, 6, th, sets) * 0.5
        while np.any(np.linalg.norm(mu, axis=1) >= th.tau_f - KINK_MARGIN):
            mu = _sample_mu(rng, 6, th, sets) * 0.5
        return {"mu": mu}

    return DiffOp("loss_angle", fwd, bwd, kinks), _retry(sampler, kinks)


def _op_loss_reg():
    th = RegThresholds()
    sets = np.array([0, 1, 2, 0, 1, 2, 0, 1])

    def fwd(x):
        res = loss_reg(x["mu"], sets, th)
        return np.array(res.value), res.grad_mu

    def bwd(g, up):
        return {"mu": up * g}

    def kinks(x):
        _polar_kinks(x["mu"], th, th.tau_for(sets))

    return DiffOp("loss_reg", fwd, bwd, kinks), lambda rng: {"mu": _sample_mu(rng, len(sets), th, sets)}


def _op_ssim():
    def fwd(x):
        s, g = ssim(x["x"], x["y"], return_grad=True)
        return np.array(s), g

    def bwd(g, up):
        return {"x": up * g}

    def sampler(rng):
        y = rng.uniform(0, 1, size=(9, 10, 3))
        return {"x": np.clip(y + rng.normal(0, 0.1, y.shape), 0, 1), "y": y}

    # the value is an image mean, so per-pixel slopes are small and round-off
    # dominates at 1e-5; truncation takes over again past 1e-4
    return DiffOp("ssim", fwd, bwd, h=3e-5), sampler


def _l1_kinks(a, b):
    if np.any(np.abs(a - b) <= KINK_MARGIN):
        raise SampledAtKink("rendered pixel equals target (L1 kink)")


def _op_loss_rgb():
    def fwd(x):
        res = loss_rgb(x["x"], x["y"], 0.2)
        return np.array(res.value), res.grad

    def bwd(g, up):
        return {"x": up * g}

    def kinks(x):
        _l1_kinks(x["x"], x["y"])

    def sampler(rng):
        y = rng.uniform(0, 1, size=(9, 10, 3))
        return {"x": y + rng.normal(0, 0.1, y.shape), "y": y}

    return DiffOp("loss_rgb", fwd, bwd, kinks), _retry(sampler, kinks)


def _op_to_global():
    rng0 = np.random.default_rng(1234)
    V = rng0.normal(size=(5, 3))
    F = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
    R, C0, S = face_frames(V, F)
    qR = matrix_to_quat(R)
    binding = np.array([0, 0, 1, 2, 2, 1])
    n = len(binding)

    def fwd(x):
        s = SplatSet(x["mu"], x["rot"], x["log_scale"], np.zeros((n, 3)), np.zeros(n), binding)
        g = transform_to_global(s, R, C0 + x["center"], S, qR)
        return np.concatenate([g.means, g.quats, g.scales], axis=1), g

    def bwd(g, up):
        d_mu, d_rot, d_ls, d_c = transform_to_global_backward(g, up[:, 0:3], up[:, 3:7], up[:, 7:10])
        d_center = np.zeros_like(C0)
        np.add.at(d_center, binding, d_c)
        return {"mu": d_mu, "rot": d_rot, "log_scale": d_ls, "center": d_center}

    def sampler(rng):
        rot = rng.normal(size=(n, 4))
        return {
            "mu": rng.normal(0, 0.5, (n, 3)),
            "rot": rot / np.linalg.norm(rot, axis=1, keepdims=True) * rng.uniform(0.5, 2.0, (n, 1)),
            "log_scale": rng.normal(-1, 0.5, (n, 3)),
            "center": rng.normal(0, 0.1, C0.shape),
        }

    return DiffOp("to_global", fwd, bwd), sampler


def _op_project():
    cam = _tiny_camera()

    def fwd(x):
        p = project(x["means"], x["quats"], x["scales"], cam)
        return np.concatenate([p.mean2d, p.conic], axis=1), p

    def bwd(p, up):
        dm, dq, ds = project_backward(p, cam, up[:, 0:2], up[:, 2:5])
        return {"means": dm, "quats": dq, "scales": ds}

    def sampler(rng):
        s = _sample_scene(rng)
        return {k: s[k] for k in ("means", "quats", "scales")}

    return DiffOp("project", fwd, bwd), sampler


def _conic_to_cov(conic):
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    det = a * c - b * b
    cov = np.empty((len(conic), 2, 2))
    cov[:, 0, 0] = c / det
    cov[:, 0, 1] = cov[:, 1, 0] = -b / det
    cov[:, 1, 1] = a / det
    return cov


def _op_composite(cutoff: float = 3.0):
    cam = _tiny_camera()
    bg = np.array([0.1, 0.2, 0.3])

    def fwd(x):
        n = len(x["mean2d"])
        depth = np.arange(n, dtype=np.float64) + 1.0
        proj = Projection(x["mean2d"], _conic_to_cov(x["conic"]), depth, np.ones(n, bool), x["conic"])
        img, cache = composite(proj, x["colors"], x["opacity_logit"], cam, bg, cutoff)
        return img, cache

    def bwd(cache, up):
        dc, do, dm, dk = composite_backward(cache, up)
        return {"mean2d": dm, "conic": dk, "colors": dc, "opacity_logit": do}

    def kinks(x):
        _render_kinks(x["mean2d"], x["conic"], x["opacity_logit"], cam, cutoff)

    def sampler(rng):
        n = 5
        L = rng.normal(0, 0.4, size=(n, 2, 2)) + np.eye(2) * rng.uniform(0.4, 0.8, (n, 1, 1))
        cov = L @ np.transpose(L, (0, 2, 1)) * 8.0 + np.eye(2) * 0.3
        inv = np.linalg.inv(cov)
        return {
            "mean2d": rng.uniform(1.0, 14.0, size=(n, 2)),
            "conic": np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], axis=1),
            "colors": rng.uniform(0, 1, (n, 3)),
            "opacity_logit": rng.uniform(-2.0, 3.0, n),
        }

    return DiffOp("composite", fwd, bwd, kinks), _retry(sampler, kinks)


def _scene_kinks(cam, cutoff):
    def check(x):
        p = project(x["means"], x["quats"], x["scales"], cam)
        _render_kinks(p.mean2d, p.conic, x["opacity_logit"], cam, cutoff, p.valid)

    return check


def _op_render(cutoff: float = 3.0):
    cam = _tiny_camera()
    bg = np.array([0.1, 0.2, 0.3])

    def fwd(x):
        return render(x["means"], x["quats"], x["scales"], x["colors"], x["opacity_logit"], cam, bg, cutoff)

    def bwd(cache, up):
        g = render_backward(cache, up)
        return {"means": g.means, "quats": g.quats, "scales": g.scales, "colors": g.colors, "opacity_logit": g.opacity_logit}

    kinks = _scene_kinks(cam, cutoff)
    return DiffOp("render", fwd, bwd, kinks), _retry(_sample_scene, kinks)


def _op_pipeline(cutoff: float = 3.0):
    """Render followed by the photometric loss against a fixed target."""
    cam = _tiny_camera()
    bg = np.array([0.1, 0.2, 0.3])
    target = np.random.default_rng(99).uniform(0, 1, size=(16, 16, 3))

    def fwd(x):
        img, cache = render(x["means"], x["quats"], x["scales"], x["colors"], x["opacity_logit"], cam, bg, cutoff)
        res = loss_rgb(img, target)
        return np.array(res.value), (cache, res.grad)

    def bwd(c, up):
        cache, g_img = c
        g = render_backward(cache, up * g_img)
        return {"means": g.means, "quats": g.quats, "scales": g.scales, "colors": g.colors, "opacity_logit": g.opacity_logit}

    scene_check = _scene_kinks(cam, cutoff)

    def kinks(x):
        scene_check(x)
        img, _ = render(x["means"], x["quats"], x["scales"], x["colors"], x["opacity_logit"], cam, bg, cutoff)
        _l1_kinks(img, target)

    return DiffOp("render_loss", fwd, bwd, kinks), _retry(_sample_scene, kinks)


def _op_deform():
    enc = PosEncoding(3)

    def unpack(x):
        net = DeformMLP(2, 1, enc, [x["W0"], x["W1"]], [x["b0"], x["b1"]])
        return net

    def fwd(x):
        net = unpack(x)
        inp = np.concatenate([x["psi"], x["theta"], deform.encode_timestep(0.37, enc)])
        return net.forward_raw(inp), net

    def bwd(net, up):
        g, gin = net.backward(up)
        g["psi"] = gin[0:2]
        g["theta"] = gin[2:3]
        return g

    def sampler(rng):
        d = 2 + 1 + enc.dim
        return {
            "W0": rng.normal(0, 0.5, (6, d)), "b0": rng.normal(0, 0.1, 6),
            "W1": rng.normal(0, 0.5, (3, 6)), "b1": rng.normal(0, 0.1, 3),
            "psi": rng.normal(size=2), "theta": rng.normal(size=1),
        }

    return DiffOp("deform_mlp", fwd, bwd), sampler


_BUILDERS = {
    "polar": _op_polar,
    "to_global": _op_to_global,
    "loss_p": _op_loss_p,
    "loss_angle": _op_loss_angle,
    "loss_reg": _op_loss_reg,
    "ssim": _op_ssim,
    "loss_rgb": _op_loss_rgb,
    "project": _op_project,
    "composite": _op_composite,
    "render": _op_render,
    "deform_mlp": _op_deform,
    "render_loss": _op_pipeline,
}

# module name -> op names; every name listed in a module's DIFFERENTIABLE must appear here
MODULES = {
    "geometry": geometry,
    "splats": splats,
    "losses": losses,
    "renderer": renderer,
    "deform": deform,
}
PIPELINE_OPS = ("render_loss",)
TOLERANCE = {"render_loss": 1e-4}
DEFAULT_TOLERANCE = 1e-5


def registry() -> dict:
    """``{name: (DiffOp, sampler)}`` for every registered operation."""
    return {name: build() for name, build in _BUILDERS.items()}


def ops_for_module(module: str) -> list[str]:
    if module == "all":
        return list(_BUILDERS)
    if module == "pipeline":
        return list(PIPELINE_OPS)
    if module not in MODULES:
        raise KeyError(module)
    return list(MODULES[module].DIFFERENTIABLE)


def unregistered() -> list[str]:
    """Differentiable module operations missing from the registry."""
    missing = []
    for mod_name, mod in MODULES.items():
        for op in getattr(mod, "DIFFERENTIABLE", ()):
            if op not in _BUILDERS:
                missing.append(f"{mod_name}.{op}")
    return missing


def tolerance(name: str) -> float:
    return TOLERANCE.get(name, DEFAULT_TOLERANCE)
