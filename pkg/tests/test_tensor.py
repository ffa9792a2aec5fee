import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vkd import tensor as T
from vkd.tensor import Tensor, ShapeError, backward, finite_difference_check


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_matmul_identity(rng):
    v = rng.standard_normal(3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)


def test_softplus_zero():
    assert T.softplus(Tensor(0.0)).item() == 0.6931471805599453


def test_softplus_is_stable_for_large_inputs():
    out = T.softplus(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[1] == 800.0


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg


def test_broadcast_only_over_leading_batch_dim():
    T.add(Tensor(np.ones((4, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 1))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 4, 3))), Tensor(np.ones(3)))


def test_values_row_major():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert x.values.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert x.values.size == int(np.prod(x.shape))


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_power_rule():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 6.0


def test_sigmoid_dot_matches_finite_difference():
    w = Tensor([0.2, -0.1], requires_grad=True)
    v = Tensor([1.0, 2.0])
    err = finite_difference_check(lambda: T.sigmoid(T.matmul(w, v)), [w], h=1e-5)
    assert err < 1e-6


def test_backward_on_non_scalar_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_without_graph_is_an_error():
    with pytest.raises(RuntimeError):
        backward(T.sum_(Tensor(np.ones(3))))


def test_accumulation_over_two_paths():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = T.sum_(T.exp(x) + T.mul(x, 3.0))
    backward(y)
    np.testing.assert_allclose(x.grad, np.exp([1.5, -2.0]) + 3.0)


def test_grads_reset_unless_accumulating():
    x = Tensor([2.0], requires_grad=True)
    backward(T.sum_(x * 2.0))
    backward(T.sum_(x * 2.0))
    assert x.grad[0] == 2.0
    backward(T.sum_(x * 2.0), accumulate=True)
    assert x.grad[0] == 4.0


def test_graph_visits_each_node_once_in_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = T.tanh(x)
    b = a * a + a
    root = T.sum_(b)
    nodes = T.Graph.trace(root).nodes
    ids = [id(n) for n in nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        if n._ctx is not None:
            for parent in n._ctx.inputs:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._ctx is None


def test_sum_of_squares_gradcheck(rng):
    params = [Tensor(rng.standard_normal((2, 3)), requires_grad=True), Tensor(rng.standard_normal(4), requires_grad=True)]
    err = finite_difference_check(lambda: T.sum_(T.square(params[0])) + T.sum_(T.square(params[1])), params)
    assert err < 1e-9


@pytest.mark.parametrize("h", [0.0, -1e-5, 2e-3])
def test_gradcheck_rejects_bad_step(h):
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        finite_difference_check(lambda: T.sum_(x * x), [x], h=h)


def test_gradcheck_reports_non_finite_coordinate():
    x = Tensor([1.0, 1e-6], requires_grad=True)
    with pytest.raises(T.GradCheckError, match=r"\(1,\)"):
        finite_difference_check(lambda: T.sum_(T.log(x)), [x], h=1e-5)


class TestDropout:
    def test_identity_when_not_training(self, rng):
        x = Tensor(rng.standard_normal((5, 7)))
        assert T.dropout(x, 0.5, False, (0, 1, 2)) is x

    def test_deterministic_and_scaled(self):
        x = Tensor(np.ones((50, 40)))
        a = T.dropout(x, 0.5, True, (7, 1, 3)).data
        b = T.dropout(x, 0.5, True, (7, 1, 3)).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}
        kept = (a != 0).mean()
        assert abs(kept - 0.5) < 0.05

    def test_seed_components_matter(self):
        x = Tensor(np.ones((20, 20)))
        a = T.dropout(x, 0.5, True, (7, 1, 3)).data
        b = T.dropout(x, 0.5, True, (7, 2, 3)).data
        c = T.dropout(x, 0.5, True, (7, 1, 4)).data
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, True, 0)


def test_embed_mean_skips_padding():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = T.embed_mean(table, np.array([[1, 3, 0, 0], [0, 0, 0, 0]])).data
    np.testing.assert_allclose(out[0], (table.data[1] + table.data[3]) / 2)
    np.testing.assert_array_equal(out[1], np.zeros(3))


def test_slice_rejects_fancy_indexing():
    with pytest.raises(TypeError):
        Tensor(np.ones((3, 3)))[[0, 1]]


def test_seeded_replay_is_bitwise(rng):
    w = rng.standard_normal((4, 3))

    def run():
        p = Tensor(w, requires_grad=True)
        h = T.dropout(T.relu(T.matmul(Tensor(np.ones((2, 4))), p)), 0.5, True, (1, 2, 3))
        root = T.sum_(T.softplus(h))
        backward(root)
        return root.item(), p.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a == b
    assert np.array_equal(ga, gb)


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_composite_expression_gradcheck(rows, cols, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.uniform(-1, 1, (rows, cols)), requires_grad=True)
    b = Tensor(r.uniform(-1, 1, cols), requires_grad=True)

    def f():
        h = T.tanh(a * b + b)
        return T.mean(T.sigmoid(h) * T.exp(T.mul(h, 0.3)))

    assert finite_difference_check(f, [a, b]) < 1e-4
