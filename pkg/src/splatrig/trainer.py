"""Optimisation loop: all-rigid warm-up, one-shot APS, adaptive thresholds after.

One step evaluates the rig, moves the mouth parts by the deformation
networks' offsets, places splats through their face frames, renders,
back-propagates the photometric loss plus the offset regulariser, and takes
an Adam step on every parameter group.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aps import ApsEvent, FaceSetAssignment, run_aps
from .deform import DeformMLP, PosEncoding
from .errors import BadCheckpoint, ConfigError, NonFiniteLoss
from .io import decode_checkpoint, encode_checkpoint
from .losses import LossReport, Metrics, RegThresholds, loss_reg, loss_rgb, metrics, psnr_from_mse
from .mouth import MouthPart, offset_vertices
from .renderer import Camera, render, render_backward
from .rig import BlendRig, RigParams, Scene, evaluate_vertices
from .splats import (
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    DensifyOptions,
    SplatSet,
    densify_and_prune,
    frames_for,
    initialize_on_mesh,
    transform_to_global,
    transform_to_global_backward,
)

log = logging.getLogger(__name__)


@dataclass
class LearningRates:
    mu: float = 1.6e-4
    rot: float = 1e-3
    log_scale: float = 5e-3
    color: float = 2.5e-3
    opacity_logit: float = 5e-2
    deform: float = 1e-4

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DensifyConfig:
    enabled: bool = False
    interval: int = 100
    start: int = 100
    until: int = 10**9
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.6
    split_factor: float = 1.6
    prune_opacity: float = 5e-3
    max_splats: int = 200_000

    def options(self) -> DensifyOptions:
        return DensifyOptions(self.grad_threshold, self.scale_threshold, self.split_factor, self.prune_opacity, self.max_splats)


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    aps_step: int = 100_000
    lam: float = 0.2
    thresholds: RegThresholds = field(default_factory=RegThresholds)
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    deform: bool = True
    deform_hidden: tuple = (64, 64, 64)
    num_freqs: int = 6
    per_face: int = 1
    seed: int = 0
    threads: int = 1
    cutoff: float = 3.0
    log_interval: int = 100
    eval_interval: int = 0
    checkpoint_interval: int = 0

    def validate(self) -> None:
        if not 0 < self.aps_step < self.total_steps:
            raise ConfigError(f"need 0 < aps_step < total_steps (got aps_step={self.aps_step}, total_steps={self.total_steps})")
        for k, v in self.lr.as_dict().items():
            if v < 0:
                raise ConfigError(f"learning rate {k} must be non-negative")
        if self.per_face < 1:
            raise ConfigError("per_face must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["deform_hidden"] = list(self.deform_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "thresholds" in d:
                d["thresholds"] = RegThresholds(**d["thresholds"])
            if "lr" in d:
                d["lr"] = LearningRates(**d["lr"])
            if "densify" in d:
                d["densify"] = DensifyConfig(**d["densify"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if "deform_hidden" in d:
            d["deform_hidden"] = tuple(d["deform_hidden"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam over a dict of named arrays with per-group learning rates."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            lr = lrs[k]
            if lr == 0.0:
                continue
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def remap(self, keys, parent: np.ndarray, is_new: np.ndarray) -> None:
        """Follow a densify/prune: gather moments by parent, zero them for new children."""
        for k in keys:
            if k in self.m:
                for store in (self.m, self.v):
                    a = store[k][parent]
                    a[is_new] = 0.0
                    store[k] = a

    def state(self, prefix: str = "") -> dict:
        out = {f"{prefix}t": np.array([float(self.t)])}
        for k in self.m:
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def load(self, arrays: dict, prefix: str = "") -> None:
        self.t = int(arrays[f"{prefix}t"][0])
        for key, val in arrays.items():
            if not key.startswith(prefix) or key == f"{prefix}t":
                continue
            kind, name = key[len(prefix) :].split("/", 1)
            (self.m if kind == "m" else self.v)[name] = val.copy()


@dataclass
class Model:
    """Everything a fit needs that is not optimised."""

    rig: BlendRig
    camera: Camera
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        F = self.rig.base.n_faces
        self.face_mouth_label = np.full(F, -1, dtype=np.int64)
        if self.rig.aug is not None:
            self.face_mouth_label[self.rig.aug.new_face_ids] = self.rig.aug.part_label

    @classmethod
    def from_scene(cls, scene: Scene) -> "Model":
        return cls(scene.rig, scene.camera, np.asarray(scene.spec.background, dtype=np.float64))


@dataclass
class TrainState:
    splats: SplatSet
    assignment: FaceSetAssignment
    nets: dict  # {"upper": DeformMLP, "lower": DeformMLP} or {}
    config: TrainConfig
    step: int = 0
    aps_done: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    order: list = field(default_factory=list)
    adam: Adam = field(default_factory=Adam)
    adam_nets: Adam = field(default_factory=Adam)
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aps_event: ApsEvent | None = None

    @property
    def aps_step(self) -> int:
        return self.config.aps_step


def init_state(cfg: TrainConfig, model: Model) -> TrainState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    splats = initialize_on_mesh(model.rig.base, cfg.per_face)
    assignment = FaceSetAssignment.initial(model.rig.base.part_of_face, model.rig.mouth_parts)
    nets = {}
    if cfg.deform and model.rig.aug is not None:
        net_rng = np.random.default_rng(cfg.seed + 7919)
        for name in ("upper", "lower"):
            nets[name] = DeformMLP.create(
                model.rig.psi_dim, model.rig.theta_dim, cfg.deform_hidden, PosEncoding(cfg.num_freqs), net_rng
            )
    n = len(splats)
    return TrainState(splats, assignment, nets, cfg, rng=rng, grad_accum=np.zeros(n), grad_count=np.zeros(n))


def posed_vertices(state: TrainState, model: Model, params: RigParams, inference: bool) -> np.ndarray:
    V = evaluate_vertices(model.rig, params)
    if state.nets and model.rig.aug is not None:
        du = state.nets["upper"].forward(params.psi, params.theta, params.T, inference=inference)
        dl = state.nets["lower"].forward(params.psi, params.theta, params.T, inference=inference)
        V = offset_vertices(V, model.rig.aug, du, dl)
    return V


def render_frame(state: TrainState, model: Model, params: RigParams, camera: Camera | None = None, inference: bool = True):
    V = posed_vertices(state, model, params, inference)
    R, C, S, qR = frames_for(V, model.rig.base.faces)
    g = transform_to_global(state.splats, R, C, S, qR)
    img, _ = render(
        g.means, g.quats, g.scales, g.colors, g.opacity_logit, camera or model.camera, model.background,
        state.config.cutoff, state.config.threads,
    )
    return img


def train_step(state: TrainState, model: Model, image: np.ndarray, params: RigParams) -> LossReport:
    """One optimisation step on one frame; mutates ``state`` and returns the loss breakdown."""
    cfg = state.config
    splats = state.splats
    V = posed_vertices(state, model, params, inference=False)
    R, C, S, qR = frames_for(V, model.rig.base.faces)
    g = transform_to_global(splats, R, C, S, qR)
    img, cache = render(
        g.means, g.quats, g.scales, g.colors, g.opacity_logit, model.camera, model.background, cfg.cutoff, cfg.threads
    )
    rgb = loss_rgb(img, image, cfg.lam)
    reg = loss_reg(splats.mu, state.assignment.splat_sets(splats.binding), cfg.thresholds)
    total = rgb.value + reg.value
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at step {state.step + 1}: l_rgb={rgb.value} l_reg={reg.value}")

    rg = render_backward(cache, rgb.grad)
    d_mu, d_rot, d_ls, d_center = transform_to_global_backward(g, rg.means, rg.quats, rg.scales)
    d_mu = d_mu + reg.grad_mu
    grads = {"mu": d_mu, "rot": d_rot, "log_scale": d_ls, "color": rg.colors, "opacity_logit": rg.opacity_logit}
    lr = cfg.lr.as_dict()
    state.adam.step(splats.params(), grads, {k: lr[k] for k in grads})

    if state.nets:
        label = model.face_mouth_label[splats.binding]
        net_params, net_grads, net_lrs = {}, {}, {}
        for name, part in (("upper", MouthPart.UPPER), ("lower", MouthPart.LOWER)):
            # a uniform part offset moves each bound frame centre by exactly that offset
            d_dv = np.sum(d_center[label == part], axis=0)
            wg, _ = state.nets[name].backward(d_dv)
            for k, p in state.nets[name].params().items():
                net_params[f"{name}.{k}"] = p
                net_grads[f"{name}.{k}"] = wg[k]
                net_lrs[f"{name}.{k}"] = lr["deform"]
        state.adam_nets.step(net_params, net_grads, net_lrs)

    if lr["rot"] != 0.0:
        splats.normalize_rotations()
    if lr["color"] != 0.0:
        np.clip(splats.color, 0.0, 1.0, out=splats.color)
    if lr["log_scale"] != 0.0:
        np.clip(splats.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=splats.log_scale)

    gn = np.linalg.norm(rg.mean2d, axis=1)
    state.grad_accum += gn
    state.grad_count += gn > 0
    state.step += 1
    return LossReport(
        step=state.step,
        l_rgb=rgb.value,
        l1=rgb.l1,
        dssim=rgb.dssim,
        l_reg=reg.value,
        l_p_by_set=reg.by_set,
        l_angle=reg.angle,
        total=total,
        grad_norms=gn,
    )


def next_frame(state: TrainState, train_ids) -> int:
    if not state.order:
        ids = list(train_ids)
        state.order = [ids[i] for i in state.rng.permutation(len(ids))]
    return state.order.pop(0)


def densify_state(state: TrainState, model: Model):
    avg = np.divide(state.grad_accum, state.grad_count, out=np.zeros_like(state.grad_accum), where=state.grad_count > 0)
    new, report = densify_and_prune(state.splats, avg, state.config.densify.options(), state.rng, model.rig.base.n_faces)
    state.adam.remap(SplatSet.PARAMS, report.parent, report.is_new)
    state.splats = new
    state.grad_accum = np.zeros(len(new))
    state.grad_count = np.zeros(len(new))
    if report.empty_faces:
        log.warning("densify left %d faces without splats", len(report.empty_faces))
    return report


@dataclass
class FitResult:
    state: TrainState
    history: list
    eval_history: list
    aps: ApsEvent | None


def evaluate(state: TrainState, model: Model, scene: Scene, ids, inference: bool) -> Metrics:
    """Metrics over the given frames; PSNR comes from the pooled MSE."""
    ms = [metrics(render_frame(state, model, scene.params[i], inference=inference), scene.images[i]) for i in ids]
    mse = float(np.mean([m.mse for m in ms]))
    return Metrics(mse, psnr_from_mse(mse), float(np.mean([m.ssim for m in ms])))


def fit(cfg: TrainConfig, scene: Scene, state: TrainState | None = None, out_dir=None, on_log=None) -> FitResult:
    """Run (or resume) the full schedule on a scene."""
    model = Model.from_scene(scene)
    if state is None:
        state = init_state(cfg, model)
    cfg = state.config
    cfg.validate()
    if not scene.train_ids:
        raise ConfigError("scene has no training frames")
    history, eval_history = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.step < cfg.total_steps:
        i = next_frame(state, scene.train_ids)
        report = train_step(state, model, scene.images[i], scene.params[i])
        s = state.step
        d = cfg.densify
        if d.enabled and s % d.interval == 0 and d.start <= s <= d.until and s < cfg.aps_step:
            densify_state(state, model)
        if s == cfg.aps_step:
            state.aps_event = run_aps(state, model.rig.base, model.rig.mouth_parts)
        if cfg.log_interval and (s % cfg.log_interval == 0 or s == cfg.total_steps):
            history.append(report)
            if on_log is not None:
                on_log(report.line())
        if cfg.eval_interval and (s % cfg.eval_interval == 0 or s == cfg.total_steps):
            rec = {"step": s, "train": evaluate(state, model, scene, scene.train_ids, inference=False)}
            if scene.test_ids:
                rec["test"] = evaluate(state, model, scene, scene.test_ids, inference=True)
            eval_history.append(rec)
        if out is not None and cfg.checkpoint_interval and (s % cfg.checkpoint_interval == 0 or s == cfg.total_steps):
            (out / f"ckpt_{s:07d}.gavt").write_bytes(checkpoint_bytes(state))
    return FitResult(state, history, eval_history, state.aps_event)


def animate(state: TrainState, model: Model, params_seq, camera: Camera | None = None) -> list:
    """Render a novel parameter sequence; the deformation networks run with timestep 0."""
    return [render_frame(state, model, p, camera, inference=True) for p in params_seq]


# --- checkpoint conversion ------------------------------------------------------


def checkpoint_bytes(state: TrainState) -> bytes:
    optim = state.adam.state("splat.")
    optim.update(state.adam_nets.state("net."))
    meta = {
        "step": state.step,
        "aps_done": state.aps_done,
        "rng": state.rng.bit_generator.state,
        "order": [int(i) for i in state.order],
        "config": state.config.to_dict(),
    }
    return encode_checkpoint(
        {
            "splats": state.splats,
            "assignment": state.assignment,
            "nets": state.nets,
            "optimizer": optim,
            "densify": {"accum": state.grad_accum, "count": state.grad_count},
            "meta": _jsonable(meta),
        }
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def state_from_checkpoint(data: bytes) -> TrainState:
    ck = decode_checkpoint(data)
    meta = ck["meta"]
    if meta is None:
        raise BadCheckpoint("checkpoint lacks META section")
    cfg = TrainConfig.from_dict(meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(
        ck["splats"], ck["assignment"], ck["nets"], cfg, step=meta["step"], aps_done=meta["aps_done"], rng=rng,
        order=list(meta["order"]),
    )
    if ck["optimizer"] is not None:
        opt = ck["optimizer"]
        state.adam.load({k: v for k, v in opt.items() if k.startswith("splat.")}, "splat.")
        state.adam_nets.load({k: v for k, v in opt.items() if k.startswith("net.")}, "net.")
    if ck["densify"] is not None:
        state.grad_accum = ck["densify"]["accum"].copy()
        state.grad_count = ck["densify"]["count"].copy()
    else:
        state.grad_accum = np.zeros(len(state.splats))
        state.grad_count = np.zeros(len(state.splats))
    return state
