import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridasr import tensor as nt
from hybridasr.tensor import ShapeError, Tensor, grad_check

TOL = 1e-4

shapes2 = st.tuples(st.integers(1, 4), st.integers(1, 4))
seeds = st.integers(0, 2**31 - 1)


def _probe(shape, rng):
    """Random linear functional so every output coordinate affects the loss."""
    w = rng.normal(size=shape)
    return lambda y: nt.sum(nt.mul(y, Tensor(w)))


def _check_unary(op, shape, seed, low=-2.0, high=2.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, size=shape)
    y = op(Tensor(x))
    probe = _probe(y.shape, rng)
    assert grad_check(lambda t: probe(op(t)), x) < TOL


# ---------------------------------------------------------------- forward examples


def test_matmul_identity():
    v = np.array([[1.5], [-2.0], [0.25]])
    assert np.array_equal(nt.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)


def test_tanh_zero():
    assert np.array_equal(nt.tanh(Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))


def test_softmax_symmetric():
    assert np.allclose(nt.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=0)


def test_shape_error_names_primitive_and_extents():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        nt.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="concat"):
        nt.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2)))], axis=0)


# ---------------------------------------------------------------- backward semantics


def test_backward_square_sum():
    w = Tensor([1.0, 2.0], requires_grad=True)
    nt.backward(nt.sum(nt.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_backward_tanh_at_zero():
    w = Tensor(0.0, requires_grad=True)
    nt.backward(nt.tanh(w))
    assert w.grad == pytest.approx(1.0, abs=0)


def test_backward_accumulates_until_reset():
    w = Tensor([1.0, -3.0], requires_grad=True)
    for _ in range(3):
        nt.backward(nt.sum(nt.scale(w, 2.0)))
    assert np.array_equal(w.grad, [6.0, 6.0])
    w.zero_grad()
    nt.backward(nt.sum(w))
    assert np.array_equal(w.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nt.backward(nt.mul(w, w))


def test_tape_is_topological_and_visits_shared_nodes_once():
    w = Tensor([0.3, -0.2], requires_grad=True)
    h = nt.tanh(w)
    loss = nt.sum(nt.add(nt.mul(h, h), h))  # h reused twice
    tape = nt.Tape.from_root(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    nt.backward(loss)
    t = np.tanh(w.data)
    assert np.allclose(w.grad, (2 * t + 1) * (1 - t * t), rtol=1e-14)


def test_no_grad_skips_recording():
    w = Tensor([1.0], requires_grad=True)
    with nt.no_grad():
        y = nt.tanh(w)
    assert not y.requires_grad
    assert nt.backward(nt.sum(y)) == {}


def test_constant_input_does_not_record():
    y = nt.tanh(Tensor([1.0]))
    assert y.is_leaf and not y.requires_grad


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_sum_of_squares():
    assert grad_check(lambda t: nt.sum(nt.mul(t, t)), np.array([1.0, 2.0, 3.0]), step=1e-5) < 1e-6


def test_grad_check_constant_function():
    assert grad_check(lambda t: nt.sum(nt.scale(Tensor(np.ones(3)), 2.0)), np.array([1.0, 2.0, 3.0])) == 0.0


def test_grad_check_rejects_non_finite():
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        grad_check(lambda t: nt.sum(nt.log(t)), np.array([-1.0, 1.0]))


def test_grad_check_detects_wrong_gradient():
    def bad_square(t):
        return nt.primitive(t.data**2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert grad_check(lambda t: nt.sum(bad_square(t)), np.array([1.0, 2.0])) > 0.1


# ---------------------------------------------------------------- per-primitive property tests


@settings(max_examples=100, deadline=None)
@given(shapes2, seeds)
def test_grad_tanh(shape, seed):
    _check_unary(nt.tanh, shape, seed)


@settings(max_examples=100, deadline=None)
@given(shapes2, seeds)
def test_grad_sigmoid(shape, seed):
    _check_unary(nt.sigmoid, shape, seed)


@settings(max_examples=100, deadline=None)
@given(shapes2, seeds)
def test_grad_exp_log(shape, seed):
    _check_unary(nt.exp, shape, seed)
    _check_unary(nt.log, shape, seed, low=0.5, high=3.0)


@settings(max_examples=100, deadline=None)
@given(shapes2, seeds)
def test_grad_relu(shape, seed):
    # keep away from the kink where central differences are meaningless
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    probe = _probe(shape, rng)
    assert grad_check(lambda t: probe(nt.relu(t)), x) < TOL


@settings(max_examples=100, deadline=None)
@given(shapes2, st.integers(0, 1), seeds)
def test_grad_softmax_and_log_softmax(shape, axis, seed):
    _check_unary(lambda t: nt.softmax(t, axis=axis), shape, seed)
    _check_unary(lambda t: nt.log_softmax(t, axis=axis), shape, seed)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), seeds)
def test_grad_matmul(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    probe = _probe((n, m), rng)
    assert grad_check(lambda t: probe(nt.matmul(t, Tensor(b))), a) < TOL
    assert grad_check(lambda t: probe(nt.matmul(Tensor(a), t)), b) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), seeds)
def test_grad_bmm(bsz, n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(bsz, n, k)), rng.normal(size=(bsz, k, m))
    probe = _probe((bsz, n, m), rng)
    assert grad_check(lambda t: probe(nt.bmm(t, Tensor(b))), a) < TOL
    assert grad_check(lambda t: probe(nt.bmm(Tensor(a), t)), b) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), seeds)
def test_grad_linear(rows, n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(rows, n_in)), rng.normal(size=(n_out, n_in)), rng.normal(size=n_out)
    probe = _probe((rows, n_out), rng)
    assert grad_check(lambda t: probe(nt.linear(t, Tensor(w), Tensor(b))), x) < TOL
    assert grad_check(lambda t: probe(nt.linear(Tensor(x), t, Tensor(b))), w) < TOL
    assert grad_check(lambda t: probe(nt.linear(Tensor(x), Tensor(w), t)), b) < TOL
    ref = x @ w.T + b
    assert np.allclose(nt.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=1e-13, atol=1e-13)


@settings(max_examples=100, deadline=None)
@given(shapes2, st.booleans(), seeds)
def test_grad_add_sub_mul_with_broadcast(shape, row_vector, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    other = rng.normal(size=(1, shape[1]) if row_vector else shape)
    probe = _probe(shape, rng)
    for op in (nt.add, nt.sub, nt.mul):
        assert grad_check(lambda t: probe(op(t, Tensor(other))), x) < TOL
        assert grad_check(lambda t: probe(op(Tensor(x), t)), other) < TOL


@settings(max_examples=100, deadline=None)
@given(shapes2, st.integers(1, 3), st.integers(0, 1), seeds)
def test_grad_concat_slice_sum(shape, extra, axis, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    other_shape = list(shape)
    other_shape[axis] = extra
    y = rng.normal(size=other_shape)
    out_shape = list(shape)
    out_shape[axis] += extra
    probe = _probe(tuple(out_shape), rng)
    assert grad_check(lambda t: probe(nt.concat([t, Tensor(y)], axis=axis)), x) < TOL
    assert grad_check(lambda t: probe(nt.concat([Tensor(y), t], axis=axis)), x) < TOL
    probe_row = _probe((shape[1],), rng)
    assert grad_check(lambda t: probe_row(t[shape[0] - 1]), x) < TOL
    probe_sum = _probe((shape[1 - axis],), rng)
    assert grad_check(lambda t: probe_sum(nt.sum(t, axis=axis)), x) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), seeds)
def test_grad_max_pool(channels, h, w, seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the argmax stable under the finite-difference step
    x = rng.permutation(channels * h * w).reshape(channels, h, w) * 0.1 + rng.uniform(0, 0.01)
    out = nt.max_pool2d(Tensor(x))
    assert out.shape == (channels, -(-h // 2), -(-w // 2))
    probe = _probe(out.shape, rng)
    assert grad_check(lambda t: probe(nt.max_pool2d(t)), x) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), seeds)
def test_grad_conv2d(cin, cout, h, w, seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(cin, h, w)), rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout)
    probe = _probe((cout, h, w), rng)
    assert grad_check(lambda t: probe(nt.conv2d(t, Tensor(k), Tensor(b))), x) < TOL
    assert grad_check(lambda t: probe(nt.conv2d(Tensor(x), t, Tensor(b))), k) < TOL
    assert grad_check(lambda t: probe(nt.conv2d(Tensor(x), Tensor(k), t)), b) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 6), st.booleans(), seeds)
def test_grad_conv1d(channels, t_len, width, batched, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, t_len) if batched else t_len)
    k = rng.normal(size=(channels, width))
    out_shape = (2, t_len, channels) if batched else (t_len, channels)
    probe = _probe(out_shape, rng)
    assert grad_check(lambda t: probe(nt.conv1d_same(t, Tensor(k))), x) < TOL
    assert grad_check(lambda t: probe(nt.conv1d_same(Tensor(x), t)), k) < TOL


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), seeds)
def test_grad_masked_softmax(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, cols))
    mask = rng.random((rows, cols)) < 0.7
    mask[np.arange(rows), rng.integers(0, cols, rows)] = True
    y = nt.masked_softmax(Tensor(x), mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    probe = _probe((rows, cols), rng)
    assert grad_check(lambda t: probe(nt.masked_softmax(t, mask)), x) < TOL


# ---------------------------------------------------------------- value properties


@settings(max_examples=200, deadline=None)
@given(shapes2, st.integers(0, 1), seeds)
def test_softmax_is_a_distribution(shape, axis, seed):
    x = np.random.default_rng(seed).uniform(-20, 20, size=shape)
    y = nt.softmax(Tensor(x), axis=axis).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(axis=axis) - 1.0) <= 1e-9)


@settings(max_examples=200, deadline=None)
@given(shapes2, st.integers(0, 1), seeds)
def test_log_softmax_matches_log_of_softmax(shape, axis, seed):
    x = np.random.default_rng(seed).uniform(-20, 20, size=shape)
    a = nt.log_softmax(Tensor(x), axis=axis).data
    b = np.log(nt.softmax(Tensor(x), axis=axis).data)
    assert np.max(np.abs(a - b)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), seeds)
def test_flip_padded_is_involution_keeping_padding(lengths, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(len(lengths), 5, 2))
    y = nt.flip_padded(Tensor(x), lengths).data
    for b, n in enumerate(lengths):
        assert np.array_equal(y[b, :n], x[b, :n][::-1])
        assert np.array_equal(y[b, n:], x[b, n:])
    assert np.array_equal(nt.flip_padded(Tensor(y), lengths).data, x)
    probe = _probe(x.shape, rng)
    assert grad_check(lambda t: probe(nt.flip_padded(t, lengths)), x) < TOL


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 4))
    x = Tensor(rng.normal(size=(5, 4)))

    def f(t):
        h = nt.tanh(nt.matmul(x, nt.transpose(t)))
        return nt.sum(nt.log_softmax(nt.mul(h, h), axis=1))

    assert grad_check(f, w) < TOL
