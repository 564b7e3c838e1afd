import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmnet import diffcore as dc
from swarmnet.diffcore import Tape, Tensor


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def check_grads(build, leaves, rng, h=1e-6, rtol=1e-6):
    """Compare tape gradients of sum(w * build()) against central differences."""
    with Tape():
        out = build()
    w = rng.normal(size=out.shape)

    def scalar():
        return dc.sum_all(dc.mul(build(), Tensor(w, dtype=np.float64)))

    for x in leaves:
        x.zero_grad()
    with Tape() as tape:
        loss = dc.sum_all(dc.mul(build(), Tensor(w, dtype=np.float64)))
    tape.backward(loss)
    for x in leaves:
        for idx in np.ndindex(x.shape):
            num = dc.numeric_grad(scalar, x, idx, h)
            assert num is not None
            np.testing.assert_allclose(x.grad[idx], num, rtol=rtol, atol=1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_add_sub_mul_with_leading_broadcast(rng):
    a, b = leaf(rng, 3, 2, 4), leaf(rng, 2, 4)
    check_grads(lambda: dc.add(a, b), [a, b], rng)
    check_grads(lambda: dc.sub(b, a), [a, b], rng)
    check_grads(lambda: dc.mul(a, b), [a, b], rng)


def test_scale_tanh(rng):
    a = leaf(rng, 3, 5)
    check_grads(lambda: dc.scale(a, -2.5), [a], rng)
    check_grads(lambda: dc.tanh(a), [a], rng)


def test_relu_away_from_kink(rng):
    x = leaf(rng, 4, 6)
    x.data = np.where(np.abs(x.data) < 0.1, 0.5, x.data)
    check_grads(lambda: dc.relu(x), [x], rng)


def test_batched_matmul(rng):
    a, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    check_grads(lambda: dc.matmul(a, w), [a, w], rng)
    bias = leaf(rng, 5)
    check_grads(lambda: dc.linear(a, w, bias), [a, w, bias], rng)


def test_conv1d_grads(rng):
    s, k, b = leaf(rng, 2, 7, 3), leaf(rng, 3, 3, 4), leaf(rng, 4)
    check_grads(lambda: dc.conv1d_valid(s, k, b), [s, k, b], rng)


def test_gather_scatter_grads(rng):
    x = leaf(rng, 2, 4, 3)
    idx = np.array([0, 2, 2, 3, 1, 0])
    check_grads(lambda: dc.take_rows(x, idx), [x], rng)
    e = leaf(rng, 2, 6, 3)
    check_grads(lambda: dc.segment_sum(e, idx, 4), [e], rng)


def test_structural_ops(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 2)
    check_grads(lambda: dc.concat([a, b], axis=-1), [a, b], rng)
    c = leaf(rng, 2, 1, 4)
    check_grads(lambda: dc.concat([a, c], axis=1), [a, c], rng)
    check_grads(lambda: a[:, 1:], [a], rng)
    check_grads(lambda: dc.reshape(a, (6, 4)), [a], rng)
    check_grads(lambda: dc.swapaxes(a, 0, 2), [a], rng)


def test_mse_grad_and_precision(rng):
    p = leaf(rng, 3, 4)
    t = rng.normal(size=(3, 4))
    with Tape() as tape:
        loss = dc.mse(p, t)
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, 2 * (p.data - t) / p.data.size, rtol=1e-12)
    assert loss.data.dtype == np.float64


def test_mse_accumulates_in_float64():
    # f32 sums of many tiny squares lose digits; the result must match f64
    pred = Tensor(np.full(1_000_000, 1e-3, dtype=np.float32))
    loss = dc.mse(pred, np.zeros(1_000_000, dtype=np.float32))
    assert abs(float(loss.data) - float(np.float32(1e-3)) ** 2) < 1e-15


def test_conv1d_matches_loop(rng):
    s = rng.normal(size=(2, 9, 3))
    k = rng.normal(size=(3, 3, 5))
    b = rng.normal(size=5)
    out = dc.conv1d_valid(Tensor(s, dtype=np.float64), Tensor(k, dtype=np.float64),
                          Tensor(b, dtype=np.float64)).data
    ref = np.zeros((2, 7, 5))
    for n in range(2):
        for t in range(7):
            for tau in range(3):
                ref[n, t] += s[n, t + tau] @ k[tau]
            ref[n, t] += b
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_segment_sum_matches_loop(rng):
    x = rng.normal(size=(7, 2))
    idx = np.array([3, 0, 3, 1, 3, 0, 2])
    out = dc.segment_sum(Tensor(x, dtype=np.float64), idx, 5).data
    ref = np.zeros((5, 2))
    for row, i in zip(x, idx):
        ref[i] += row
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_too_short_series():
    with pytest.raises(dc.SeriesTooShortError):
        dc.conv1d_valid(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3, 1))))


def test_backward_twice_doubles(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        loss = dc.sum_all(dc.mul(x, x))
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * first)
    np.testing.assert_allclose(first, 2 * x.data)


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 4)
    with Tape() as tape:
        y = dc.tanh(x)
        loss = dc.sum_all(dc.add(dc.mul(y, y), y))
    tape.backward(loss)
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), rtol=1e-12)


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = dc.mul(x, x)
    with pytest.raises(dc.RankError):
        tape.backward(y)


def test_nothing_recorded_without_tape(rng):
    x = leaf(rng, 3)
    y = dc.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_untracked_inputs_not_recorded(rng):
    with Tape() as tape:
        dc.add(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert len(tape) == 0


def test_broadcast_only_over_leading_axes():
    with pytest.raises(dc.DimensionError):
        dc.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_mse_rejects_tracked_target(rng):
    with pytest.raises(dc.ParameterError):
        dc.mse(leaf(rng, 2), leaf(rng, 2))


def test_matmul_shape_error():
    with pytest.raises(dc.DimensionError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_elementwise_dispatch():
    x = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(dc.elementwise("relu", x).data, [0.0, 2.0])
    with pytest.raises(dc.ParameterError):
        dc.elementwise("softplus", x)


def test_numeric_grad_detects_kink():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True, dtype=np.float64)
    fn = lambda: dc.sum_all(dc.relu(x))  # noqa: E731
    assert dc.numeric_grad(fn, x, (0,), 1e-4) is None
    assert dc.numeric_grad(fn, x, (1,), 1e-4) == pytest.approx(1.0)


def test_adam_matches_reference():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    ref = p.data.copy()
    m = v = np.zeros(4)
    state = dc.AdamState(lr=0.01)
    for t in range(1, 4):
        g = rng.normal(size=4)
        dc.adam_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_poisoned_gradient_leaves_params():
    p = Tensor(np.ones(3), requires_grad=True, name="w")
    state = dc.AdamState()
    dc.adam_step([p], [np.ones(3, np.float32)], state)
    before = p.data.copy()
    with pytest.raises(dc.PoisonedGradientError) as err:
        dc.adam_step([p], [np.array([1.0, np.nan, 0.0], np.float32)], state)
    assert err.value.step == 2
    np.testing.assert_array_equal(p.data, before)
    assert state.step == 1


def test_dropout_mask_values():
    rng = np.random.default_rng(0)
    m = dc.dropout_mask((20000,), 0.25, rng)
    assert set(np.unique(m)) <= {0.0, np.float32(1 / 0.75)}
    assert abs(m.mean() - 1.0) < 0.02
    np.testing.assert_array_equal(dc.dropout_mask((3,), 0.0, rng), np.ones(3))
    with pytest.raises(dc.ParameterError):
        dc.dropout_mask((3,), 1.0, rng)


def test_glorot_bounds():
    w = dc.glorot_uniform((30, 50), 30, 50, np.random.default_rng(0))
    assert np.abs(w).max() <= np.sqrt(6 / 80)
    assert w.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(lead=st.lists(st.integers(1, 3), min_size=0, max_size=3),
       tail=st.lists(st.integers(1, 3), min_size=1, max_size=2))
def test_broadcast_grad_shapes(lead, tail):
    a = Tensor(np.ones(lead + tail), requires_grad=True)
    b = Tensor(np.ones(tail), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum_all(dc.mul(a, b))
    tape.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full(tail, np.prod(lead) if lead else 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sum_of_linear_grad_is_column_sums(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = dc.sum_all(dc.matmul(Tensor(x, dtype=np.float64), w))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, np.repeat(x.sum(0)[:, None], 2, axis=1), rtol=1e-12)


def test_clear_detaches_outputs(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = dc.tanh(x)
        loss = dc.sum_all(y)
    tape.backward(loss)
    tape.clear()
    assert len(tape) == 0 and y.tape is None and y.node is None
    assert x.grad is not None
