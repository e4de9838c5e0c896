import numpy as np
import pytest

from oracles import brute_force_render, random_scene
from splatrig.errors import NoForwardCache
from splatrig.renderer import ALPHA_MAX, DILATION, Camera, composite_backward, project, render, render_backward

BG = np.array([0.1, 0.2, 0.3])


def cam(size=16, f=20.0):
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)


def test_axis_projection():
    c = Camera(fx=30.0, fy=40.0, cx=7.0, cy=9.0, width=16, height=16)
    d, s = 2.5, 0.1
    p = project(np.array([[0, 0, d]]), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), s), c)
    assert np.allclose(p.mean2d[0], [7.0, 9.0], atol=1e-12)
    expect = np.diag([(30 * s / d) ** 2, (40 * s / d) ** 2]) + DILATION * np.eye(2)
    assert np.abs(p.cov2d[0] - expect).max() < 1e-12


def test_doubling_depth_halves_extent(rng):
    c = cam()
    q = rng.normal(size=(1, 4))
    q /= np.linalg.norm(q)
    s = rng.uniform(0.1, 0.3, size=(1, 3))
    m = np.array([[0.2, -0.1, 2.0]])
    a = project(m, q, s, c).cov2d[0] - DILATION * np.eye(2)
    b = project(2 * m, q, s, c).cov2d[0] - DILATION * np.eye(2)
    # covariance scales with the square of the extent
    assert np.abs(b - a / 4).max() < 1e-9 * np.abs(a).max()


def test_cov2d_positive_definite(rng):
    c = cam(32)
    means, quats, scales, *_ = random_scene(rng, 1000, c, scale=(1e-4, 2.0))
    p = project(means, quats, scales, c)
    assert np.all(np.linalg.eigvalsh(p.cov2d) > 0)


def test_behind_camera_is_culled():
    c = cam()
    p = project(np.array([[0, 0, -1.0], [0, 0, 2.0]]), np.tile([1.0, 0, 0, 0], (2, 1)), np.full((2, 3), 0.1), c)
    assert p.valid.tolist() == [False, True]
    img, _ = render(np.array([[0, 0, -1.0]]), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), 1.0), np.ones((1, 3)), np.array([5.0]), c, BG)
    assert np.array_equal(img, np.broadcast_to(BG, img.shape))


def test_zero_splats_gives_background():
    img, _ = render(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), cam(), BG)
    assert np.array_equal(img, np.broadcast_to(BG, (16, 16, 3)))


def test_single_opaque_splat_peak():
    c = cam(15, 20.0)
    img, _ = render(np.array([[0, 0, 2.0]]), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), 0.2), np.ones((1, 3)), np.array([20.0]), c, np.zeros(3))
    assert np.allclose(img[7, 7], ALPHA_MAX, atol=1e-12)
    assert img.max() == pytest.approx(ALPHA_MAX, abs=1e-12)


def test_two_overlapping_splats_match_brute_force():
    c = cam()
    means = np.array([[0.05, 0.0, 2.0], [-0.05, 0.02, 2.5]])
    quats = np.tile([1.0, 0, 0, 0], (2, 1))
    scales = np.array([[0.2, 0.1, 0.1], [0.1, 0.3, 0.1]])
    colors = np.array([[1.0, 0.2, 0.1], [0.1, 0.3, 1.0]])
    op = np.array([0.5, 1.5])
    img, _ = render(means, quats, scales, colors, op, c, BG)
    ref = brute_force_render(means, quats, scales, colors, op, c, BG)
    assert np.abs(img - ref).max() < 1e-6


def test_random_scenes_match_brute_force_across_tiles(rng):
    c = Camera(fx=30.0, fy=30.0, cx=19.5, cy=15.5, width=40, height=33)
    for _ in range(3):
        args = random_scene(rng, 12, c)
        img, _ = render(*args, c, BG)
        ref = brute_force_render(*args, c, BG)
        assert np.abs(img - ref).max() < 1e-6


def test_energy_bound_and_determinism(rng):
    c = cam(32)
    args = random_scene(rng, 60, c)
    a, _ = render(*args, c, BG)
    b, _ = render(*args, c, BG)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_threads_bit_identical(rng):
    c = cam(48)
    args = random_scene(rng, 80, c)
    a, ca = render(*args, c, BG, threads=1)
    b, cb = render(*args, c, BG, threads=4)
    assert np.array_equal(a, b)
    up = rng.normal(size=a.shape)
    ga, gb = render_backward(ca, up), render_backward(cb, up)
    for k in ("means", "quats", "scales", "colors", "opacity_logit"):
        assert np.array_equal(getattr(ga, k), getattr(gb, k))


def test_zero_upstream_zero_gradients(rng):
    c = cam()
    args = random_scene(rng, 5, c)
    img, cache = render(*args, c, BG)
    g = render_backward(cache, np.zeros_like(img))
    for k in ("means", "quats", "scales", "colors", "opacity_logit"):
        assert np.all(getattr(g, k) == 0)


def test_backward_needs_cache():
    with pytest.raises(NoForwardCache):
        composite_backward(None, np.zeros((4, 4, 3)))


def test_mean_gradient_points_toward_target():
    c = cam(32, 40.0)
    quats = np.array([[1.0, 0, 0, 0]])
    scales = np.full((1, 3), 0.08)
    colors = np.ones((1, 3))
    op = np.array([2.0])
    target, _ = render(np.array([[0.1, -0.05, 2.0]]), quats, scales, colors, op, c, np.zeros(3))
    img, cache = render(np.array([[0.0, 0.0, 2.0]]), quats, scales, colors, op, c, np.zeros(3))
    g = render_backward(cache, 2 * (img - target) / img.size)
    p_t = project(np.array([[0.1, -0.05, 2.0]]), quats, scales, c).mean2d[0]
    p_0 = project(np.array([[0.0, 0.0, 2.0]]), quats, scales, c).mean2d[0]
    step = -g.mean2d[0]
    assert step @ (p_t - p_0) > 0
