import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rhythmlab import tensor as T
from rhythmlab.flow import FlowSample, fm_loss, interpolate, target_velocity
from rhythmlab.tensor import DimensionError, Tensor

latents = arrays(np.float64, (4, 3), elements=st.floats(-10, 10))


def test_interpolate_endpoints_and_midpoint(rng):
    z0, z1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    np.testing.assert_array_equal(interpolate(z0, z1, 0.0), z0)
    np.testing.assert_array_equal(interpolate(z0, z1, 1.0), z1)
    np.testing.assert_array_equal(interpolate(np.zeros((3, 2)), np.full((3, 2), 2.0), 0.5), np.ones((3, 2)))


def test_interpolate_shape_mismatch():
    with pytest.raises(DimensionError):
        interpolate(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)


def test_interpolate_batched_times(rng):
    z0, z1 = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    out = interpolate(z0, z1, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(out[0], z0[0])
    np.testing.assert_array_equal(out[1], z1[1])


def test_target_velocity_examples():
    np.testing.assert_array_equal(target_velocity(np.ones((2, 2)), np.ones((2, 2))), np.zeros((2, 2)))
    np.testing.assert_array_equal(target_velocity(np.zeros((2, 2)), np.full((2, 2), 3.0)), np.full((2, 2), 3.0))


@given(latents, latents, st.floats(0.01, 0.99))
def test_path_derivative_is_target(z0, z1, t):
    h = 1e-6
    fd = (interpolate(z0, z1, t + h) - interpolate(z0, z1, t - h)) / (2 * h)
    np.testing.assert_allclose(fd, target_velocity(z0, z1), atol=1e-6 * (1 + np.abs(z0).max() + np.abs(z1).max()))


def test_loss_examples(rng):
    z0, z1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert fm_loss(z1 - z0, z0, z1).item() == 0.0
    assert fm_loss(np.ones((2, 2)), np.zeros((2, 2)), np.full((2, 2), 2.0)).item() == 1.0


def test_loss_matches_elementwise_loop(rng):
    pred, z0, z1 = (rng.standard_normal((6, 5)) for _ in range(3))
    total = 0.0
    for i in range(6):
        for j in range(5):
            total += (pred[i, j] - (z1[i, j] - z0[i, j])) ** 2
    assert fm_loss(pred, z0, z1).item() == pytest.approx(total / 30, abs=1e-12)


@given(latents, latents, latents)
def test_loss_nonnegative(pred, z0, z1):
    value = fm_loss(pred, z0, z1).item()
    assert value >= 0
    assert (value == 0) == bool(np.all(pred == z1 - z0))


def test_loss_gradient_closed_form(rng):
    pred = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    z0, z1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    T.backward(fm_loss(pred, z0, z1))
    np.testing.assert_allclose(pred.grad, 2 / 12 * (pred.data - (z1 - z0)), atol=1e-15)


def test_flow_sample_invariants(rng):
    s = FlowSample.draw(rng.standard_normal((7, 2)), 0.3, rng)
    np.testing.assert_allclose(s.z_t, 0.7 * s.z0 + 0.3 * s.z1, atol=1e-15)
    np.testing.assert_array_equal(s.target_v, s.z1 - s.z0)


def test_linear_model_learns_point_mass_velocity():
    # v(z, t) = W z + b trained on one fixed (z0, z1) pair converges to z1 - z0 along the path
    z0, z1 = np.array([[1.0, -1.0]]), np.array([[0.5, 2.0]])
    W = Tensor(np.zeros((2, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    rng = np.random.default_rng(0)
    for _ in range(3000):
        t = rng.uniform()
        zt = Tensor(interpolate(z0, z1, t))
        loss = fm_loss(T.add(T.matmul(zt, W), b), z0, z1)
        W.zero_grad(), b.zero_grad()
        T.backward(loss)
        W.assign(W.data - 0.1 * W.grad)
        b.assign(b.data - 0.1 * b.grad)
    for t in (0.0, 0.5, 1.0):
        v = interpolate(z0, z1, t) @ W.data + b.data
        np.testing.assert_allclose(v, z1 - z0, atol=1e-3)
