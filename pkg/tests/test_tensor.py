import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dglprompt import tensor as T
from dglprompt.tensor import GradTape, ShapeError, Tensor, grad_check


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_matmul_identity_and_selection():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal((Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [5.0]])).data, [[2.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        rand(3, 4) @ rand(3, 2)
    assert "(3, 4)" in str(err.value) and "(3, 2)" in str(err.value)


def test_matmul_grad_matches_finite_difference():
    b = rand(4, 2, seed=1)
    assert grad_check(lambda x: T.sum(x @ b), rand(3, 4)) < 1e-6
    a = rand(3, 4, seed=2)
    assert grad_check(lambda y: T.sum(a @ y), rand(4, 2, seed=3)) < 1e-6


def test_batched_matmul_grads():
    w = rand(5, 3, seed=4)
    assert grad_check(lambda x: T.sum(T.gelu(x @ w)), rand(2, 3, 4, 5)) < 1e-5
    x = rand(2, 3, 4, 5, seed=5)
    assert grad_check(lambda w_: T.sum(T.gelu(x @ w_)), w) < 1e-5
    k = rand(2, 1, 5, 6, seed=6)
    assert grad_check(lambda q: T.sum(T.exp(T.scale(q @ k, 0.1))), rand(2, 3, 4, 5, seed=7)) < 1e-5
    q = rand(2, 3, 4, 5, seed=8)
    assert grad_check(lambda k_: T.sum(T.exp(T.scale(q @ k_, 0.1))), k) < 1e-5


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == 1.0 and y[1] < 1e-300


def test_softmax_nan_propagates():
    assert np.isnan(T.softmax(Tensor([np.nan, 1.0])).data).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_grad():
    w = rand(8, seed=1)
    assert grad_check(lambda x: T.sum(T.mul(T.softmax(x), w)), rand(8)) < 1e-6
    w5 = rand(5, seed=2)
    assert grad_check(lambda x: T.sum(T.mul(T.softmax(x), w5)), rand(5, seed=3)) < 1e-6


def test_layer_norm_values():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full(4, 3.0)), one, zero).data, 0.0)
    y = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(y, [1.0, -1.0], atol=1e-5)


def test_layer_norm_grads():
    g, b = rand(6, seed=1), rand(6, seed=2)
    w = rand(2, 6, seed=3)
    f = lambda x: T.sum(T.mul(T.layer_norm(x, g, b), w))  # noqa: E731
    assert grad_check(f, rand(2, 6)) < 1e-5
    x = rand(2, 6, seed=4)
    assert grad_check(lambda g_: T.sum(T.mul(T.layer_norm(x, g_, b), w)), g) < 1e-5
    assert grad_check(lambda b_: T.sum(T.mul(T.layer_norm(x, g, b_), w)), b) < 1e-5


def test_grad_check_sum_is_exact():
    assert grad_check(lambda x: T.sum(x), rand(3, 3)) < 1e-10


def test_grad_check_rejects_nonscalar_and_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: x, rand(3))
    with pytest.raises(ValueError):
        grad_check(lambda x: T.sum(x), rand(3), step=1e-2)


def test_grad_check_restores_input():
    x = rand(3)
    before = x.data.copy()
    grad_check(lambda v: T.sum(T.exp(v)), x)
    np.testing.assert_array_equal(x.data, before)
    assert x.grad is None and not x.requires_grad


ELEMENTWISE = {
    "add": lambda x, c: T.add(x, c),
    "sub": lambda x, c: T.sub(c, x),
    "mul": lambda x, c: T.mul(x, c),
    "scale": lambda x, c: T.scale(x, -2.5),
    "exp": lambda x, c: T.exp(x),
    "gelu": lambda x, c: T.gelu(x),
    "l2_normalize": lambda x, c: T.l2_normalize(x),
    "transpose": lambda x, c: T.transpose(x),
    "reshape": lambda x, c: T.reshape(x, (4, 3)),
    "mean": lambda x, c: T.mean(x, axis=0, keepdims=True),
    "broadcast": lambda x, c: T.broadcast_to(x[:1], (5, 3, 4)),
    "slice": lambda x, c: x[1:, ::2],
    "concat": lambda x, c: T.concat([x, c], axis=1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_grads(name):
    c = rand(3, 4, seed=11)
    op = ELEMENTWISE[name]
    probe = np.random.default_rng(12)

    def f(x):
        y = op(x, c)
        return T.sum(T.mul(y, Tensor(probe_for(y.shape))))

    cache = {}

    def probe_for(shape):
        if shape not in cache:
            cache[shape] = probe.normal(size=shape)
        return cache[shape]

    assert grad_check(f, rand(3, 4)) < 1e-5


def test_broadcast_binary_grads():
    y = rand(4, seed=1)
    assert grad_check(lambda x: T.sum(T.exp(T.mul(x, y))), rand(3, 4)) < 1e-5
    x = rand(3, 4, seed=2)
    assert grad_check(lambda y_: T.sum(T.exp(T.add(x, y_))), y) < 1e-5


def test_embedding_grad_accumulates_repeats():
    table = rand(5, 3)
    ids = np.array([[0, 2], [2, 4]])
    w = rand(2, 2, 3, seed=1)
    assert grad_check(lambda tb: T.sum(T.mul(T.embedding(tb, ids), w)), table) < 1e-6
    table.requires_grad = True
    with GradTape() as tape:
        out = T.sum(T.embedding(table, ids))
    tape.backward(out)
    np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0, 1])


def test_embedding_rejects_bad_ids():
    with pytest.raises(IndexError):
        T.embedding(rand(3, 2), np.array([3]))


def test_cross_entropy_value_and_grad():
    logits = rand(4, 5)
    target = np.array([0, 3, 1, 4])
    z = logits.data
    ref = np.mean([np.log(np.exp(z[i]).sum()) - z[i, target[i]] for i in range(4)])
    assert abs(T.cross_entropy(logits, target).item() - ref) < 1e-12
    assert grad_check(lambda x: T.cross_entropy(x, target), logits) < 1e-6


def test_fancy_index_grad():
    rows, cols = np.array([0, 2, 2]), np.array([1, 0, 1])
    assert grad_check(lambda x: T.sum(T.exp(x[rows, cols])), rand(3, 2)) < 1e-6


def test_concat_then_slice_is_identity():
    a, b, c = rand(2, 3), rand(2, 1, seed=1), rand(2, 4, seed=2)
    cat = T.concat([a, b, c], axis=1)
    np.testing.assert_array_equal(cat[:, :3].data, a.data)
    np.testing.assert_array_equal(cat[:, 3:4].data, b.data)
    np.testing.assert_array_equal(cat[:, 4:].data, c.data)


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        T.concat([rand(2, 3), rand(3, 3)], axis=1)


def test_no_grad_buffers_without_requires_grad():
    a, b = rand(3, 3), rand(3, 3, seed=1)
    with GradTape() as tape:
        out = T.sum(T.softmax(a @ b))
    assert tape.nodes == []
    tape.backward(out)
    assert a.grad is None and b.grad is None


def test_backward_accumulates_and_frozen_input_stays_clean():
    w = Tensor(np.ones(3), requires_grad=True)
    frozen = rand(3)
    with GradTape() as tape:
        out = T.sum(T.mul(w, frozen)) + T.sum(w)
    tape.backward(out)
    np.testing.assert_allclose(w.grad, frozen.data + 1)
    assert frozen.grad is None
    with GradTape() as tape:
        out = T.sum(w)
    tape.backward(out)
    np.testing.assert_allclose(w.grad, frozen.data + 2)


def test_tape_nodes_in_append_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = T.exp(x)
        z = T.sum(y)
    assert [n.op for n in tape.nodes] == ["exp", "sum"]
    assert y._node.index < z._node.index
