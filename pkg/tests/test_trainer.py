import numpy as np
import pytest

from splatrig.errors import AlreadyRan, ConfigError, NonFiniteLoss
from splatrig.geometry import axis_angle_to_matrix
from splatrig.losses import FaceSet
from splatrig.mouth import MouthPart
from splatrig.rig import RigParams, generate_scene, preset_spec
from splatrig.aps import run_aps
from splatrig.splats import frames_for, transform_to_global
from splatrig.trainer import (
    Adam,
    DensifyConfig,
    LearningRates,
    Model,
    TrainConfig,
    animate,
    checkpoint_bytes,
    fit,
    init_state,
    next_frame,
    posed_vertices,
    render_frame,
    state_from_checkpoint,
    train_step,
)

SMOKE_LR = LearningRates(mu=5e-3, rot=5e-3, log_scale=1e-2, color=2e-2, opacity_logit=5e-2)


@pytest.fixture(scope="module")
def smoke():
    return generate_scene(preset_spec("smoke", n_frames=6, width=32, height=32), seed=0)


@pytest.fixture(scope="module")
def mouth():
    return generate_scene(preset_spec("mouth", n_frames=4, n_test=1, width=32, height=32), seed=0)


def cfg(**kw):
    base = dict(total_steps=20, aps_step=10, lr=SMOKE_LR, log_interval=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError, match="aps_step"):
        TrainConfig(total_steps=10, aps_step=10).validate()
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, aps_step=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, aps_step=5, lr=LearningRates(mu=-1.0)).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"total_steps": 5, "nonsense": 1})


def test_config_defaults_and_round_trip(tmp_path):
    c = TrainConfig()
    assert (c.total_steps, c.aps_step, c.lam) == (200_000, 100_000, 0.2)
    assert c.lr.as_dict() == dict(mu=1.6e-4, rot=1e-3, log_scale=5e-3, color=2.5e-3, opacity_logit=5e-2, deform=1e-4)
    c2 = cfg(densify=DensifyConfig(enabled=True, interval=3), deform_hidden=(8, 8))
    assert TrainConfig.from_dict(c2.to_dict()) == c2
    p = tmp_path / "c.json"
    import json

    p.write_text(json.dumps(c2.to_dict()))
    assert TrainConfig.load(p) == c2


def test_adam_first_step_moves_by_lr():
    opt = Adam()
    p = {"x": np.array([1.0, -2.0, 3.0])}
    opt.step(p, {"x": np.array([0.5, -4.0, 0.0])}, {"x": 0.1})
    assert np.allclose(p["x"], [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_zero_rate_leaves_params():
    opt = Adam()
    p = {"x": np.array([1.0, 2.0])}
    opt.step(p, {"x": np.array([1.0, 1.0])}, {"x": 0.0})
    assert p["x"].tolist() == [1.0, 2.0]


def test_zero_learning_rates_leave_state_unchanged(mouth):
    c = cfg(lr=LearningRates(0, 0, 0, 0, 0, 0))
    model = Model.from_scene(mouth)
    st = init_state(c, model)
    st.splats.mu[:] = np.random.default_rng(0).normal(size=st.splats.mu.shape) * 0.05
    before = st.splats.copy()
    nets = {k: n.copy() for k, n in st.nets.items()}
    rep = train_step(st, model, mouth.images[0], mouth.params[0])
    assert np.isfinite(rep.total)
    for k in ("mu", "rot", "log_scale", "color", "opacity_logit", "binding"):
        assert np.array_equal(getattr(st.splats, k), getattr(before, k))
    for k in nets:
        for a, b in zip(nets[k].weights, st.nets[k].weights):
            assert np.array_equal(a, b)


def test_report_additivity(smoke):
    model = Model.from_scene(smoke)
    st = init_state(cfg(), model)
    for i in range(5):
        rep = train_step(st, model, smoke.images[i], smoke.params[i])
        assert rep.total == rep.l_rgb + rep.l_reg
        assert min(rep.l_rgb, rep.l1, rep.dssim, rep.l_reg, rep.l_angle) >= 0


def test_non_finite_loss_raises(smoke):
    model = Model.from_scene(smoke)
    st = init_state(cfg(), model)
    bad = smoke.images[0].copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_step(st, model, bad, smoke.params[0])


def test_deform_gradients_reach_the_networks(mouth):
    model = Model.from_scene(mouth)
    st = init_state(cfg(), model)
    assert set(st.nets) == {"upper", "lower"}
    w_before = st.nets["lower"].weights[-1].copy()
    train_step(st, model, mouth.images[0], mouth.params[0])
    assert np.abs(st.adam_nets.m["lower.W3"]).max() > 0
    assert np.abs(st.adam_nets.m["upper.W3"]).max() > 0
    assert not np.array_equal(st.nets["lower"].weights[-1], w_before)


def test_epoch_order_is_a_permutation(smoke):
    model = Model.from_scene(smoke)
    st = init_state(cfg(), model)
    ids = [next_frame(st, smoke.train_ids) for _ in range(len(smoke.train_ids))]
    assert sorted(ids) == smoke.train_ids


def test_schedule_runs_aps_once_before_the_end(smoke):
    c = cfg(total_steps=12, aps_step=11, log_interval=0)
    res = fit(c, smoke)
    assert res.state.aps_done and res.aps is not None and res.aps.step == 11
    with pytest.raises(AlreadyRan):
        run_aps(res.state, smoke.rig.base)


def test_assignment_rigid_until_aps(mouth):
    model = Model.from_scene(mouth)
    c = cfg(total_steps=6, aps_step=3, log_interval=0)
    st = init_state(c, model)
    mp = model.rig.mouth_part
    part = model.rig.base.part_of_face
    assert np.all(st.assignment.set_of_face[part != mp] == FaceSet.RIGID)
    assert np.all(st.assignment.set_of_face[part == mp] == FaceSet.MOUTH)
    res = fit(c, mouth, state=st)
    assert np.all(res.state.assignment.set_of_face == res.aps.assignment.set_of_face)
    assert np.all(res.state.assignment.set_of_face[part == mp] == FaceSet.MOUTH)


def test_same_seed_bit_identical(smoke):
    a = fit(cfg(seed=3), smoke).state
    b = fit(cfg(seed=3), smoke).state
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    model = Model.from_scene(smoke)
    assert np.array_equal(render_frame(a, model, smoke.params[0]), render_frame(b, model, smoke.params[0]))


def test_threads_bit_identical(smoke):
    a = fit(cfg(threads=1), smoke).state
    b = fit(cfg(threads=4), smoke).state
    a.config.threads = b.config.threads
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_resume_from_checkpoint_is_bit_identical(mouth, tmp_path):
    c = cfg(total_steps=10, aps_step=4, checkpoint_interval=5, densify=DensifyConfig(enabled=True, interval=2, start=2))
    full = fit(c, mouth, out_dir=tmp_path).state
    mid = state_from_checkpoint((tmp_path / "ckpt_0000005.gavt").read_bytes())
    assert mid.step == 5 and mid.aps_done
    resumed = fit(mid.config, mouth, state=mid).state
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_densify_keeps_bindings_and_optimizer_aligned(smoke):
    c = cfg(total_steps=8, aps_step=7, densify=DensifyConfig(enabled=True, interval=2, start=2, grad_threshold=0.0))
    st = fit(c, smoke).state
    n0 = smoke.rig.base.n_faces
    assert len(st.splats) > n0
    assert st.adam.m["mu"].shape == st.splats.mu.shape
    assert st.splats.binding.max() < n0


def test_replay_reproduces_training_render(smoke):
    model = Model.from_scene(smoke)
    st = fit(cfg(), smoke).state
    frames = animate(st, model, smoke.params[:2])
    for f, p in zip(frames, smoke.params[:2]):
        assert np.array_equal(f, render_frame(st, model, p, inference=False))


def test_orbit_outputs_in_range(smoke):
    from splatrig.renderer import Camera

    model = Model.from_scene(smoke)
    st = fit(cfg(), smoke).state
    spec = smoke.spec
    for ang in np.linspace(-0.6, 0.6, 4):
        eye = np.array([np.sin(ang), 0.0, np.cos(ang)]) * np.linalg.norm(spec.eye)
        cam = Camera.look_at(eye, spec.target, fx=spec.fx_scale * spec.width, width=spec.width, height=spec.height)
        img = animate(st, model, [smoke.params[0]], cam)[0]
        assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1


def test_jaw_open_moves_lower_mouth_rigidly(mouth):
    model = Model.from_scene(mouth)
    st = init_state(cfg(deform=False), model)
    rng = np.random.default_rng(1)
    st.splats.mu = rng.normal(size=st.splats.mu.shape) * 0.05
    rig = model.rig
    closed = RigParams(np.zeros(rig.psi_dim), np.zeros(1))
    opened = RigParams(np.zeros(rig.psi_dim), np.array([0.3]))

    def means(p):
        V = posed_vertices(st, model, p, inference=True)
        return transform_to_global(st.splats, *frames_for(V, rig.base.faces)).means

    lower = model.face_mouth_label[st.splats.binding] == MouthPart.LOWER
    a, b = means(closed)[lower], means(opened)[lower]
    Rj = axis_angle_to_matrix(rig.jaw_axis * 0.3)
    expect = (a - rig.jaw_pivot) @ Rj.T + rig.jaw_pivot
    assert np.abs(b - expect).max() < 1e-9


def test_loss_decreases_over_windows_on_a_static_frame():
    sc = generate_scene(preset_spec("smoke", n_frames=1), seed=0)
    model = Model.from_scene(sc)
    st = init_state(TrainConfig(total_steps=600, aps_step=550, lr=SMOKE_LR), model)
    losses = [train_step(st, model, sc.images[0], sc.params[0]).total for _ in range(500)]
    # successive 100-step window means; single Adam spikes late in the run
    # make a pointwise comparison too brittle to pin
    means = np.array(losses).reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(means) < 0)
