import numpy as np
import pytest

from conftest import central_fd, rel_err
from spatial_lab.errors import NonFiniteError, ShapeError
from spatial_lab.numerics import (
    AdamState,
    Mlp,
    RngStream,
    adam_step,
    gauss_draw,
    init_mlp,
    load_checkpoint,
    load_mlp,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
    save_mlp,
)


# --- forward ---------------------------------------------------------------

def test_zero_weight_net_returns_last_bias():
    net = init_mlp([4, 6, 3], RngStream(0))
    net.weights[0][:] = 0
    net.weights[1][:] = 0
    net.biases[1][:] = [1.5, -2.0, 0.25]
    x = RngStream(1).normal((7, 4))
    np.testing.assert_array_equal(mlp_forward(net, x), np.tile([1.5, -2.0, 0.25], (7, 1)))


def test_identity_one_by_one():
    net = Mlp([np.ones((1, 1))], [np.zeros(1)])
    assert mlp_forward(net, np.array([0.5])).tolist() == [0.5]


def test_forward_is_reproducible(small_net):
    x = RngStream(3).normal((10, 5))
    a = mlp_forward(small_net, x)
    b = mlp_forward(small_net.copy(), x.copy())
    assert np.array_equal(a, b)


def test_shape_mismatch_raises(small_net):
    with pytest.raises(ShapeError):
        mlp_forward(small_net, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        Mlp([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])


# --- backward --------------------------------------------------------------

def test_zero_upstream_gives_zero_grads(small_net):
    g = mlp_backward(small_net, RngStream(2).normal((4, 5)), np.zeros((4, 3)))
    assert all(not a.any() for a in g.arrays()) and not g.input.any()


def test_linear_layer_grad_is_outer_product():
    net = Mlp([RngStream(4).normal((2, 3))], [np.zeros(2)])
    x, up = np.array([1.0, -2.0, 0.5]), np.array([0.3, -1.1])
    g = mlp_backward(net, x, up)
    np.testing.assert_array_equal(g.weights[0], np.outer(up, x))
    np.testing.assert_array_equal(g.biases[0], up)
    np.testing.assert_allclose(g.input, net.weights[0].T @ up, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    net = init_mlp([4, 7, 5, 2], RngStream(seed, 11))
    x = RngStream(seed, 12).normal((6, 4))
    up = RngStream(seed, 13).normal((6, 2))
    arrays = net.arrays()
    g = mlp_backward(net, x, up)
    fd = central_fd(lambda: float(np.sum(mlp_forward(net, x) * up)), arrays)
    assert rel_err(g.arrays(), fd) <= 1e-4
    fd_x = central_fd(lambda: float(np.sum(mlp_forward(net, x) * up)), [x])
    assert rel_err([g.input], fd_x) <= 1e-4


# --- Adam ------------------------------------------------------------------

def test_adam_zero_grad_is_fixed_point():
    p = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = AdamState.zeros_like(p)
    new, state = adam_step(p, [np.zeros(2), np.zeros((1, 1))], state, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(p, new))
    assert state.step == 1


def test_adam_positive_grad_strictly_decreases():
    x = [np.array([0.0])]
    state = AdamState.zeros_like(x)
    prev = 0.0
    for _ in range(20):
        x, state = adam_step(x, [np.array([1.0])], state, 0.01)
        assert x[0][0] < prev
        prev = x[0][0]


def test_adam_minimises_quadratic():
    x = [np.array([0.0])]
    state = AdamState.zeros_like(x)
    for _ in range(100):
        x, state = adam_step(x, [2 * (x[0] - 3.0)], state, 0.1)
    assert abs(x[0][0] - 3.0) < 0.1


def test_adam_rejects_non_finite_grad():
    p = [np.zeros(2)]
    state = AdamState.zeros_like(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([1.0, np.nan])], state, 0.1)
    assert state.step == 0 and not state.m[0].any()


def test_adam_inputs_untouched():
    p = [np.ones(3)]
    keep = p[0].copy()
    adam_step(p, [np.ones(3)], AdamState.zeros_like(p), 0.5)
    assert np.array_equal(p[0], keep)


# --- random streams --------------------------------------------------------

def test_stream_replay():
    a = RngStream(5, 2, 9).normal(100)
    b = RngStream(5, 2, 9).normal(100)
    assert np.array_equal(a, b)


def test_stream_counter_advances_once_per_call():
    s = RngStream(1, 1)
    s.normal(10_000)
    assert s.counter == 1
    second = s.normal(3)
    assert np.array_equal(second, RngStream(1, 1, 1).normal(3))


def test_distinct_streams_differ():
    assert not np.array_equal(RngStream(5, 1).normal(50), RngStream(5, 2).normal(50))


def test_children_are_distinct_and_stable():
    root = RngStream(3, 4)
    assert root.child(0).stream != root.child(1).stream
    assert root.child(7) == RngStream(3, 4, 99).child(7)


def test_moments():
    x = gauss_draw(RngStream(2024), 100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1) < 0.02


def test_state_roundtrip():
    s = RngStream(8, 3)
    s.uniform(4)
    t = RngStream.from_state(s.state())
    assert np.array_equal(s.normal(5), t.normal(5))


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, small_net):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    save_checkpoint(tmp_path / "c.ckpt", arrays, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta["note"] == "x"
    assert set(back) == {"a", "b"}
    assert all(np.array_equal(arrays[k], back[k]) for k in arrays)

    save_mlp(tmp_path / "n.ckpt", small_net)
    net, _ = load_mlp(tmp_path / "n.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), small_net.arrays()))


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
