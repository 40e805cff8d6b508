import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridinfer.mlp import (
    DimensionMismatch,
    ModelFormatError,
    MlpModel,
    StaleCacheError,
    backward,
    fit_normalization,
    forward,
    init_model,
    load_model,
    loss,
    read_model_header,
    save_model,
    sigmoid,
    zero_model,
)


def hand_net():
    return MlpModel(
        W1=[[1.0, -1.0], [0.5, 2.0]], b1=[0.0, -1.0], W2=[[1.0, -2.0]], b2=[0.5],
        feature_mean=[0.0, 0.0], feature_std=[1.0, 1.0],
    )


def flat_loss(model, y, s):
    return loss(forward(model, y)[0], s)


def test_init_is_deterministic_with_zero_biases():
    a = init_model((60, 300, 41), seed=3)
    b = init_model((60, 300, 41), seed=3)
    assert a == b
    assert a != init_model((60, 300, 41), seed=4)
    assert not a.b1.any() and not a.b2.any()


def test_init_scales():
    m = init_model((60, 300, 41), seed=0)
    assert m.W1.std() == pytest.approx(np.sqrt(2 / 60), rel=0.05)
    assert m.W2.std() == pytest.approx(np.sqrt(1 / 300), rel=0.05)


def test_init_rejects_zero_dims():
    with pytest.raises(ValueError):
        init_model((0, 3, 2), 0)


def test_model_arrays_are_read_only():
    m = init_model((3, 4, 2), 0)
    with pytest.raises(ValueError):
        m.W1[0, 0] = 1.0


def test_normalization_fit():
    rng = np.random.default_rng(0)
    y = rng.normal(5.0, 3.0, (1000, 4))
    y[:, 2] = 7.0  # constant column hits the floor
    m = fit_normalization(init_model((4, 5, 2), 0), y)
    np.testing.assert_allclose(m.feature_mean, y.mean(axis=0))
    assert m.feature_std[2] == 1e-8
    np.testing.assert_allclose(m.feature_std[[0, 1, 3]], y[:, [0, 1, 3]].std(axis=0))
    _, cache = forward(m, y)
    np.testing.assert_allclose(cache.x[:, [0, 1, 3]].mean(axis=0), 0, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        fit_normalization(m, y[:, :3])


def test_zero_weights_give_one_half():
    q, _ = forward(zero_model((60, 300, 41)), np.random.default_rng(0).normal(size=60))
    np.testing.assert_array_equal(q, np.full(41, 0.5))


def test_hand_evaluated_forward():
    q, cache = forward(hand_net(), [1.0, 2.0])
    # z1 = (-1, 3.5), a1 = (0, 3.5), z2 = -6.5
    np.testing.assert_array_equal(cache.z1, [[-1.0, 3.5]])
    np.testing.assert_array_equal(cache.a1, [[0.0, 3.5]])
    assert q.shape == (1,)
    assert q[0] == pytest.approx(0.0015011822567369917, rel=1e-12)


def test_forward_batch_matches_single_rows():
    m = init_model((5, 8, 3), 1)
    y = np.random.default_rng(1).normal(size=(6, 5))
    batch, _ = forward(m, y)
    for i in range(6):
        np.testing.assert_allclose(forward(m, y[i])[0], batch[i], rtol=1e-14)


def test_forward_rejects_wrong_length():
    with pytest.raises(DimensionMismatch):
        forward(init_model((5, 8, 3), 1), np.zeros(4))


def test_sigmoid_is_stable():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    with np.errstate(over="raise", invalid="raise"):
        q = sigmoid(z)
    assert q[0] == 0.0 and q[2] == 0.5 and q[-1] == 1.0
    assert q[1] == pytest.approx(9.357622968840175e-14, rel=1e-12)


def test_loss_values():
    assert loss(np.full(3, 0.5), np.array([1, 0, 1])) == pytest.approx(3 * np.log(2), rel=1e-15)
    assert loss(np.array([0.8]), np.array([1])) == pytest.approx(0.2231435513142097, rel=1e-12)
    assert loss(np.array([[0.8], [0.5]]), np.array([[1], [0]])) == pytest.approx(
        (0.2231435513142097 + np.log(2)) / 2, rel=1e-12)


def test_loss_clamps_certain_mistakes():
    assert np.isfinite(loss(np.array([0.0, 1.0]), np.array([1, 0])))


def test_loss_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        loss(np.full(3, 0.5), np.ones(2))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    m = init_model((6, 10, 4), 2)
    m = m.with_params({"b1": rng.normal(0, 0.5, 10), "b2": rng.normal(0, 0.5, 4)})
    y = rng.normal(size=(5, 6))
    s = (rng.random((5, 4)) < 0.7).astype(float)
    q, cache = forward(m, y)
    assert np.abs(cache.z1).min() > 1e-3  # no ReLU kink within reach of eps
    grads = backward(m, cache, s)
    names = list(grads)
    sizes = np.array([grads[n].size for n in names])
    eps = 1e-6
    for _ in range(100):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        base = m.params()[name]
        idx = tuple(int(rng.integers(d)) for d in base.shape)
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        num = (flat_loss(m.with_params({name: plus}), y, s)
               - flat_loss(m.with_params({name: minus}), y, s)) / (2 * eps)
        assert abs(num - grads[name][idx]) <= 1e-5 * max(1.0, abs(num), abs(grads[name][idx]))


def test_batch_gradient_is_mean_of_single_gradients():
    rng = np.random.default_rng(8)
    m = init_model((4, 6, 3), 0)
    y = rng.normal(size=(7, 4))
    s = (rng.random((7, 3)) < 0.5).astype(float)
    whole = backward(m, forward(m, y)[1], s)
    parts = [backward(m, forward(m, y[i])[1], s[i]) for i in range(7)]
    for name in whole:
        np.testing.assert_allclose(whole[name], np.mean([p[name] for p in parts], axis=0), atol=1e-14)


def test_stale_cache_rejected():
    m = init_model((4, 6, 3), 0)
    _, cache = forward(m, np.zeros(4))
    other = m.with_params({"b2": np.ones(3)})
    with pytest.raises(StaleCacheError):
        backward(other, cache, np.ones(3))


def test_forward_and_backward_do_not_mutate_model():
    m = init_model((4, 6, 3), 0)
    before = {k: v.copy() for k, v in m.params().items()}
    backward(m, forward(m, np.ones((2, 4)))[1], np.ones((2, 3)))
    for k, v in before.items():
        np.testing.assert_array_equal(m.params()[k], v)


def test_save_load_round_trip(tmp_path):
    m = fit_normalization(init_model((6, 9, 4), 5, b"\x01" * 32),
                          np.random.default_rng(0).normal(size=(20, 6)))
    path = tmp_path / "m.bin"
    save_model(m, path)
    back = load_model(path)
    assert back == m
    y = np.random.default_rng(1).normal(size=(3, 6))
    np.testing.assert_array_equal(forward(back, y)[0], forward(m, y)[0])
    header = read_model_header(path)
    assert (header["K"], header["H"], header["L"], header["seed"]) == (6, 9, 4, 5)


def test_load_checks_dims_and_grid(tmp_path):
    path = tmp_path / "m.bin"
    save_model(init_model((6, 9, 4), 5, b"\x01" * 32), path)
    with pytest.raises(DimensionMismatch):
        load_model(path, feature_dim=7)
    with pytest.raises(DimensionMismatch):
        load_model(path, grid_fingerprint=bytes(32))
    load_model(path, feature_dim=6, grid_fingerprint=b"\x01" * 32)


def test_load_rejects_corrupt_files(tmp_path):
    path = tmp_path / "m.bin"
    save_model(init_model((3, 4, 2), 0), path)
    blob = path.read_bytes()
    for bad in (blob[:-8], blob + b"\0", blob[:2], b"\x05\0\0\0{bad}" + blob[9:]):
        path.write_bytes(bad)
        with pytest.raises(ModelFormatError):
            load_model(path)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)))
def test_hidden_unit_permutation_invariance(perm):
    m = init_model((3, 5, 2), 4)
    m = m.with_params({"b1": np.arange(5) * 0.1})
    perm = list(perm)
    shuffled = m.with_params({"W1": m.W1[perm], "b1": m.b1[perm], "W2": m.W2[:, perm]})
    y = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_allclose(forward(shuffled, y)[0], forward(m, y)[0], rtol=1e-13)
