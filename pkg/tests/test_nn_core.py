import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egnn_mimo.mimo_model import FormatError
from egnn_mimo.nn_core import (
    AdamState,
    DenseLayer,
    GruCell,
    ParamVector,
    adam_step,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    cross_entropy,
    fd_gradient,
    gru_forward,
    init_params,
    mlp_forward,
    softmax,
    softmax_ce_from_labels,
)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_identity_and_relu_layers():
    x = np.array([[-1.0, 2.0]])
    ident = DenseLayer(np.eye(2), np.zeros(2), "identity")
    np.testing.assert_array_equal(mlp_forward([ident], x), x)
    relu = DenseLayer(np.eye(2), np.zeros(2), "relu")
    np.testing.assert_array_equal(mlp_forward([relu], x), [[0.0, 2.0]])


def test_two_layer_mlp_matches_straight_line_code():
    rng = np.random.default_rng(0)
    W1, b1, W2, b2 = rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=(2, 5)), rng.normal(size=2)
    x = rng.normal(size=(4, 3))
    out = mlp_forward([DenseLayer(W1, b1, "tanh"), DenseLayer(W2, b2, "sigmoid")], x)
    for r in range(4):
        hidden = [np.tanh(sum(W1[k, c] * x[r, c] for c in range(3)) + b1[k]) for k in range(5)]
        for o in range(2):
            expect = _sig(sum(W2[o, k] * hidden[k] for k in range(5)) + b2[o])
            assert abs(out[r, o] - expect) < 1e-14


def test_layer_shape_errors():
    with pytest.raises(ValueError):
        DenseLayer(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        mlp_forward([DenseLayer(np.eye(2), np.zeros(2))], np.ones((1, 3)))
    with pytest.raises(ValueError):
        DenseLayer(np.eye(2), np.zeros(2), "gelu")


def _gru(rng, nin, nh, scale=1.0):
    return GruCell(
        *(
            rng.normal(scale=scale, size=s)
            for s in [(nh, nin + nh), (nh,), (nh, nin + nh), (nh,), (nh, nin + nh), (nh,)]
        )
    )


def test_gru_zero_weights():
    cell = _gru(np.random.default_rng(0), 3, 4, scale=0.0)
    h = np.array([[1.0, -2.0, 0.5, 4.0]])
    np.testing.assert_allclose(gru_forward(cell, np.ones((1, 3)), h), 0.5 * h)
    np.testing.assert_array_equal(gru_forward(cell, np.zeros((1, 3)), np.zeros((1, 4))), np.zeros((1, 4)))


def test_gru_matches_step_by_step_equations():
    rng = np.random.default_rng(1)
    nin, nh = 3, 4
    cell = _gru(rng, nin, nh)
    x, h = rng.normal(size=nin), rng.normal(size=nh)
    xh = np.concatenate([x, h])
    z = _sig(cell.Wz @ xh + cell.bz)
    r = _sig(cell.Wr @ xh + cell.br)
    c = np.tanh(cell.Wc @ np.concatenate([x, r * h]) + cell.bc)
    expect = (1 - z) * h + z * c
    np.testing.assert_allclose(gru_forward(cell, x, h)[0], expect, atol=1e-14)
    with pytest.raises(ValueError):
        gru_forward(cell, np.ones(2), h)


def test_gru_backward_against_finite_differences():
    rng = np.random.default_rng(2)
    nin, nh, N = 3, 5, 4
    cell = _gru(rng, nin, nh, scale=0.7)
    x, h = rng.normal(size=(N, nin)), rng.normal(size=(N, nh))
    weight = rng.normal(size=(N, nh))
    names = ["Wz", "bz", "Wr", "br", "Wc", "bc"]
    pv = ParamVector.pack({k: getattr(cell, k) for k in names} | {"x": x, "h": h})

    def loss(v):
        c = GruCell(*(v[k] for k in names))
        return float(np.sum(weight * c.step(v["x"], v["h"])[0]))

    grads = {k: np.zeros_like(getattr(cell, k)) for k in names}
    _, cache = cell.step(x, h)
    dx, dh = cell.step_backward(weight, cache, grads)
    fd = fd_gradient(loss, pv, 1e-6)
    for k in names:
        np.testing.assert_allclose(grads[k], fd[k], atol=1e-8)
    np.testing.assert_allclose(dx, fd["x"], atol=1e-8)
    np.testing.assert_allclose(dh, fd["h"], atol=1e-8)


def test_softmax_properties():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    for c in (-50.0, 0.0, 7.5, 1e6):
        np.testing.assert_allclose(softmax([c, c, c]), [1 / 3] * 3, atol=1e-15)
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(v, shift):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(softmax(np.array(v) + shift), p, atol=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy([[1.0, 0.0]], [[1.0, 0.0]]) == 0.0
    assert cross_entropy([[0.0, 1.0]], [[0.5, 0.5]]) == pytest.approx(np.log(2), abs=1e-15)
    assert cross_entropy([[1.0, 0.0]], [[0.9, 0.1]]) == pytest.approx(-np.log(0.9), abs=1e-15)
    assert cross_entropy([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(-np.log(1e-30))


def test_softmax_ce_gradient_closed_form():
    logits = np.zeros((3, 2))
    labels = np.array([0, 1, 1])
    loss, p, dlogits = softmax_ce_from_labels(logits, labels)
    assert loss == pytest.approx(np.log(2))
    onehot = np.eye(2)[labels]
    np.testing.assert_allclose(dlogits, (p - onehot) / 3)


def test_quadratic_gradient_via_fd():
    theta = ParamVector.pack({"a": np.array([1.0, -2.0, 3.5]), "b": np.array([[0.25]])})
    fd = fd_gradient(lambda v: 0.5 * float(v.flat @ v.flat), theta, 1e-5)
    np.testing.assert_allclose(fd.flat, theta.flat, atol=1e-9)
    with pytest.raises(ValueError):
        fd_gradient(lambda v: 0.0, theta, 0.0)


def test_param_vector_round_trip():
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([7.0, 8.0])}
    pv = ParamVector.pack(arrays)
    assert pv.size == 8
    back = pv.unpack()
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    pv["w"][0, 0] = 42.0
    assert pv.flat[0] == 42.0
    with pytest.raises(ValueError):
        ParamVector([("w", (2, 2))], np.zeros(3))


def test_adam_first_step_and_zero_gradient():
    theta = ParamVector.pack({"t": np.array([0.0])})
    state = AdamState.for_params(theta)
    adam_step(state, theta, np.array([1.0]))
    assert theta.flat[0] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1
    frozen = ParamVector.pack({"t": np.array([0.3, -1.2])})
    st_ = AdamState.for_params(frozen)
    before = frozen.flat.copy()
    for _ in range(50):
        adam_step(st_, frozen, np.zeros(2))
    np.testing.assert_array_equal(frozen.flat, before)
    with pytest.raises(ValueError):
        adam_step(st_, frozen, np.zeros(3))


def test_adam_minimizes_quadratic():
    theta = ParamVector.pack({"t": np.array([1.0])})
    state = AdamState.for_params(theta, lr=3e-3)
    for _ in range(1000):
        adam_step(state, theta, theta.flat.copy())
    assert abs(theta.flat[0]) < 0.01
    assert np.all(state.v >= 0)


def test_init_params_glorot_bounds_and_determinism():
    layout = [("mlp1.W", (32, 3)), ("mlp1.b", (32,)), ("gru.Wz", (6, 10))]
    a = init_params(layout, 5)
    b = init_params(layout, 5)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(layout, 6).flat)
    bound = np.sqrt(6 / 35)
    assert np.all(np.abs(a["mlp1.W"]) <= bound) and np.abs(a["mlp1.W"]).max() > 0.5 * bound
    assert np.all(a["mlp1.b"] == 0)
    assert np.all(np.abs(a["gru.Wz"]) <= np.sqrt(6 / 16))


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(4)
    entries = {"a.W": rng.normal(size=7), "ümlaut": np.array([np.pi]), "empty": np.zeros(0)}
    back = checkpoint_from_bytes(checkpoint_to_bytes(entries))
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].tobytes() == entries[k].astype("<f8").tobytes()


def test_checkpoint_format_errors():
    buf = checkpoint_to_bytes({"w": np.ones(3)})
    with pytest.raises(FormatError) as err:
        checkpoint_from_bytes(b"BAD!" + buf[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        checkpoint_from_bytes(buf[:-4])
    assert err.value.offset == len(buf) - 4
    with pytest.raises(FormatError):
        checkpoint_from_bytes(buf[:6])
