"""Pinned desk-scale experiments.

The scripts in ``scripts/`` and the acceptance suite both call these, so
the numbers they report come from one code path. Each ``*_config``
returns the pinned settings; keyword overrides go straight to
:class:`TrainConfig`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .losses import FaceSet
from .rig import Scene, generate_scene, preset_spec
from .trainer import LearningRates, Model, TrainConfig, TrainState, evaluate, fit, init_state, next_frame, train_step

# desk-scale rates: the production defaults assume ~1e5 steps
SMOKE_LR = LearningRates(mu=5e-3, rot=5e-3, log_scale=1e-2, color=2e-2, opacity_logit=5e-2)
# slow geometry keeps rigid-part drift small during warm-up, fast colour
# lets appearance settle first
APS_LR = LearningRates(mu=1e-4, rot=1.6e-4, log_scale=1.6e-4, color=5e-2, opacity_logit=0.2)
MOUTH_LR = LearningRates(mu=2e-3, rot=2e-3, log_scale=4e-3, color=8e-3, opacity_logit=2e-2, deform=3e-4)

SMOKE_MAX_STEPS = 5000
SMOKE_TARGET_PSNR = 30.0
APS_WARMUP = 1500
MOUTH_STEPS = 1000
# two timestep frequencies: coarser than the frame spacing of a short
# sequence, so the networks cannot key on individual frames
MOUTH_NUM_FREQS = 2


def smoke_config(**kw) -> TrainConfig:
    base = dict(total_steps=SMOKE_MAX_STEPS, aps_step=SMOKE_MAX_STEPS - 1, lr=SMOKE_LR, log_interval=0,
                eval_interval=100)
    return TrainConfig(**{**base, **kw})


def aps_config(**kw) -> TrainConfig:
    base = dict(total_steps=APS_WARMUP + 1, aps_step=APS_WARMUP, lr=APS_LR, log_interval=0)
    return TrainConfig(**{**base, **kw})


def mouth_config(**kw) -> TrainConfig:
    base = dict(total_steps=MOUTH_STEPS, aps_step=MOUTH_STEPS // 2, lr=MOUTH_LR, num_freqs=MOUTH_NUM_FREQS,
                log_interval=0)
    return TrainConfig(**{**base, **kw})


# --- smoke fit ----------------------------------------------------------------


@dataclass
class SmokeResult:
    reached: bool
    steps: int
    psnr: float
    history: list  # (step, train psnr)
    state: TrainState
    seconds: float


def smoke_fit(seed: int = 0, cfg: TrainConfig | None = None, scene: Scene | None = None,
              target: float = SMOKE_TARGET_PSNR) -> SmokeResult:
    """Fit the smoke scene, checking training PSNR every ``eval_interval`` steps; stops at ``target``."""
    t0 = time.perf_counter()
    cfg = cfg or smoke_config(seed=seed)
    cfg.validate()
    scene = scene or generate_scene(preset_spec("smoke"), seed=seed, threads=cfg.threads)
    model = Model.from_scene(scene)
    state = init_state(cfg, model)
    history = []
    psnr = -np.inf
    while state.step < cfg.total_steps:
        i = next_frame(state, scene.train_ids)
        train_step(state, model, scene.images[i], scene.params[i])
        if state.step % cfg.eval_interval == 0:
            psnr = evaluate(state, model, scene, scene.train_ids, inference=False).psnr
            history.append((state.step, psnr))
            if psnr >= target:
                break
    return SmokeResult(psnr >= target, state.step, psnr, history, state, time.perf_counter() - t0)


# --- APS oracle ---------------------------------------------------------------


@dataclass
class ApsOracleResult:
    seed: int
    correct: bool
    truth: dict
    predicted: dict
    distances: dict
    tau: float
    margin: float  # smallest gap between tau and any part distance
    seconds: float = 0.0

    def line(self) -> str:
        d = " ".join(f"{k}={v:.4f}" for k, v in self.distances.items())
        return f"seed={self.seed} correct={self.correct} tau={self.tau:.4f} margin={self.margin:.4f} {d}"


def aps_oracle(seed: int, cfg: TrainConfig | None = None, scene: Scene | None = None) -> ApsOracleResult:
    """Warm up on the constructed scene, run the partitioning and compare with the ground truth."""
    t0 = time.perf_counter()
    cfg = cfg or aps_config(seed=seed)
    scene = scene or generate_scene(preset_spec("aps"), seed=seed, threads=cfg.threads)
    res = fit(cfg, scene)
    asg = res.aps.assignment
    names = scene.rig.base.part_names
    predicted, distances = {}, {}
    for k, name in enumerate(names):
        if asg.part_set[k] == FaceSet.MOUTH:
            continue
        predicted[name] = "flexible" if asg.part_set[k] == FaceSet.FLEXIBLE else "rigid"
        distances[name] = float(asg.distances[k])
    truth = {k: scene.truth[k] for k in predicted}
    margin = min(abs(d - asg.tau_part) for d in distances.values())
    return ApsOracleResult(seed, predicted == truth, truth, predicted, distances, float(asg.tau_part), margin,
                           time.perf_counter() - t0)


# --- mouth ablation -------------------------------------------------------------


@dataclass
class AblationResult:
    seed: int
    test_mse: dict = field(default_factory=dict)  # "deform" / "static" -> held-out MSE
    train_mse: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def deform_wins(self) -> bool:
        return self.test_mse["deform"] < self.test_mse["static"]

    def line(self) -> str:
        return (f"seed={self.seed} test_mse_deform={self.test_mse['deform']:.6g} "
                f"test_mse_static={self.test_mse['static']:.6g} deform_wins={self.deform_wins}")


def mouth_ablation(seed: int, cfg: TrainConfig | None = None, scene: Scene | None = None) -> AblationResult:
    """Same scene and seed with and without the part-wise deformation networks."""
    t0 = time.perf_counter()
    cfg = cfg or mouth_config(seed=seed)
    scene = scene or generate_scene(preset_spec("mouth"), seed=seed, threads=cfg.threads)
    model = Model.from_scene(scene)
    out = AblationResult(seed)
    for label, deform in (("deform", True), ("static", False)):
        c = TrainConfig.from_dict({**cfg.to_dict(), "deform": deform})
        state = fit(c, scene).state
        out.test_mse[label] = evaluate(state, model, scene, scene.test_ids, inference=True).mse
        out.train_mse[label] = evaluate(state, model, scene, scene.train_ids, inference=False).mse
    out.seconds = time.perf_counter() - t0
    return out
