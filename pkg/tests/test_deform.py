import numpy as np
import pytest

from splatrig.deform import DeformMLP, PosEncoding, encode_timestep
from splatrig.errors import DimensionMismatch, NoForwardCache


def test_encoding_at_zero():
    assert encode_timestep(0.0, PosEncoding(4, True)).tolist() == [0, 0, 1, 0, 1, 0, 1, 0, 1]


def test_encoding_half():
    e = encode_timestep(0.5, PosEncoding(1, False))
    assert e[0] == pytest.approx(1.0, abs=1e-15)
    assert e[1] == pytest.approx(0.0, abs=1e-15)


def test_encoding_degenerate():
    assert encode_timestep(0.3, PosEncoding(0, True)).tolist() == [0.3]
    assert PosEncoding(5, True).dim == 11
    with pytest.raises(ValueError):
        encode_timestep(float("nan"), PosEncoding())


def test_zero_init_gives_zero_offset(rng):
    net = DeformMLP.create(4, 1)
    for _ in range(10):
        assert np.all(net.forward(rng.normal(size=4), rng.normal(size=1), rng.uniform()) == 0.0)


def test_inference_pins_timestep(rng):
    net = DeformMLP.create(3, 1, (8, 8))
    for W in net.weights:
        W[...] = rng.normal(size=W.shape)
    psi, theta = rng.normal(size=3), rng.normal(size=1)
    a = net.forward(psi, theta, 0.73, inference=True)
    b = net.forward(psi, theta, 0.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, net.forward(psi, theta, 0.73))


def test_dimension_check():
    net = DeformMLP.create(4, 1)
    with pytest.raises(DimensionMismatch):
        net.forward(np.zeros(3), np.zeros(1), 0.0)


def test_backward_needs_forward():
    net = DeformMLP.create(2, 1)
    with pytest.raises(NoForwardCache):
        net.backward(np.ones(3))
    net.forward(np.zeros(2), np.zeros(1), 0.0)
    net.backward(np.ones(3))
    with pytest.raises(NoForwardCache):
        net.backward(np.ones(3))


def test_zero_upstream_gives_zero_gradients(rng):
    net = DeformMLP.create(2, 1, (5,), rng=rng)
    net.forward(rng.normal(size=2), rng.normal(size=1), 0.2)
    grads, gx = net.backward(np.zeros(3))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(gx == 0)


def test_single_linear_layer_is_outer_product(rng):
    net = DeformMLP.create(2, 1, (), PosEncoding(0, True))
    x = net.inputs(rng.normal(size=2), rng.normal(size=1), 0.4)
    net.forward_raw(x)
    up = rng.normal(size=3)
    grads, gx = net.backward(up)
    assert np.allclose(grads["W0"], np.outer(up, x), atol=1e-15)
    assert np.allclose(grads["b0"], up)


def test_weight_gradients_match_central_differences(rng):
    net = DeformMLP.create(3, 2, (7, 6), PosEncoding(2), rng=rng)
    for W in net.weights:
        W[...] = rng.normal(size=W.shape) * 0.5
    for b in net.biases:
        b[...] = rng.normal(size=b.shape) * 0.1
    x = net.inputs(rng.normal(size=3), rng.normal(size=2), 0.31)
    up = rng.normal(size=3)
    net.forward_raw(x)
    grads, gx = net.backward(up)
    h = 1e-6
    worst = 0.0
    for key, p in net.params().items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = up @ net.forward_raw(x)
            p[idx] = old - h
            fm = up @ net.forward_raw(x)
            p[idx] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - grads[key][idx]) / max(abs(num), abs(grads[key][idx]), 1e-6))
    assert worst < 1e-5
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        num = (up @ net.forward_raw(x + e) - up @ net.forward_raw(x - e)) / (2 * h)
        assert abs(num - gx[i]) <= 1e-5 * max(abs(num), 1e-6)


def test_nets_are_independent(rng):
    a = DeformMLP.create(2, 1, (4,), rng=rng)
    b = a.copy()
    x = (rng.normal(size=2), rng.normal(size=1), 0.5)
    before = b.forward(*x)
    a.weights[-1][...] = 1.0
    assert np.array_equal(b.forward(*x), before)
    assert not np.array_equal(a.forward(*x), before)
