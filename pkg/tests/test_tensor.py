import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sake import tensor as T
from sake.tensor import NonFiniteError, ShapeError, Tensor
from sake.verify import finite_diff_grad

from conftest import grad_close


def naive_matmul(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_rule(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        g = rng.standard_normal((3, 2))
        T.reduce_sum(T.matmul(a, b) * g).backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestElementwise:
    def test_silu_zero(self):
        assert T.elementwise("silu", Tensor(0.0)).item() == 0.0

    def test_sigmoid_zero(self):
        assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5

    @pytest.mark.parametrize("kind", ["tanh", "silu", "celu", "sigmoid", "exp", "square", "sqrt", "log"])
    def test_unary_gradient_matches_central_difference(self, kind):
        x0 = 0.3
        x = Tensor(x0, requires_grad=True)
        T.elementwise(kind, x).backward()
        fn = lambda p: float(T.elementwise(kind, Tensor(p)).data)
        numeric = finite_diff_grad(fn, np.array(x0), h=1e-6)
        assert abs(x.grad - numeric) < 1e-8

    def test_celu_negative_branch(self):
        x = Tensor(-2.0, requires_grad=True)
        y = T.celu(x)
        y.backward()
        assert y.item() == pytest.approx(np.exp(-2.0) - 1.0)
        assert x.grad == pytest.approx(np.exp(-2.0))

    def test_division_by_zero_propagates(self):
        out = T.div(Tensor([1.0]), Tensor([0.0]))
        assert np.isinf(out.data[0])
        with pytest.raises(NonFiniteError):
            T.check_finite(out)

    def test_log_and_sqrt_of_negative_are_flagged(self):
        for kind in ("log", "sqrt"):
            with pytest.raises(NonFiniteError):
                T.check_finite(T.elementwise(kind, Tensor([-1.0])))

    def test_sqrt_gradient_at_zero_is_zero(self):
        x = Tensor([0.0, 4.0], requires_grad=True)
        T.reduce_sum(T.sqrt(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_bad_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_leading_axis_broadcast_gradient(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.arange(3.0), requires_grad=True)
        T.reduce_sum(a * b).backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])
        np.testing.assert_array_equal(a.grad, np.tile(np.arange(3.0), (4, 1)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise("relu6", Tensor(1.0))


class TestReduce:
    def test_sum(self):
        assert T.reduce("sum", Tensor([1, 2, 3]), 0).item() == 6

    def test_mean(self):
        assert T.reduce("mean", Tensor([2, 4]), 0).item() == 3

    def test_max_first_index_tie_break(self):
        x = Tensor([5.0, 5.0, 1.0], requires_grad=True)
        m = T.reduce("max", x, 0)
        m.backward()
        assert m.item() == 5
        np.testing.assert_array_equal(x.grad, [1, 0, 0])

    def test_max_along_axis(self):
        x = Tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
        m = T.reduce_max(x, axis=1)
        T.reduce_sum(m).backward()
        np.testing.assert_array_equal(m.data, [3, 2])
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_max_of_empty_axis(self):
        with pytest.raises(ShapeError):
            T.reduce_max(Tensor(np.zeros((0,))), 0)

    def test_sum_of_empty_axis_is_zero(self):
        assert T.reduce_sum(Tensor(np.zeros((0,))), 0).item() == 0.0

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.reduce_sum(Tensor([1.0]), 1)


class TestConcat:
    def test_basic(self):
        assert T.concat([Tensor([1.0]), Tensor([2.0, 3.0])]).data.tolist() == [1, 2, 3]

    def test_single_is_identity(self):
        t = Tensor([1.0, 2.0])
        assert T.concat([t]) is t

    def test_split_after_concat_roundtrip(self, rng):
        parts = [rng.standard_normal((3, k)) for k in (1, 4, 2)]
        out = T.concat([Tensor(p) for p in parts], axis=1).data
        back = np.split(out, [1, 5], axis=1)
        for a, b in zip(parts, back):
            np.testing.assert_array_equal(a, b)

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor([1.0]), Tensor([[1.0]])])

    def test_gradient_slices_back(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        T.reduce_sum(T.concat([a, b]) * Tensor([1.0, 2.0, 3.0])).backward()
        np.testing.assert_array_equal(a.grad, [1, 2])
        np.testing.assert_array_equal(b.grad, [3])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.reduce_sum(T.square(x)).backward()
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_constant_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(x * 0.0) + 3.0
        loss.backward()
        np.testing.assert_array_equal(x.grad, [0, 0])

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_sigmoid_dot_against_finite_differences(self, rng):
        w0, x = rng.standard_normal(5), rng.standard_normal(5)
        w = Tensor(w0, requires_grad=True)
        T.sigmoid(T.reduce_sum(w * x)).backward()
        numeric = finite_diff_grad(lambda p: float(T.sigmoid(T.reduce_sum(Tensor(p) * x)).data), w0, h=1e-5)
        assert grad_close(w.grad, numeric)

    def test_shared_subexpression_visited_once(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad == 12.0

    def test_no_gradient_into_constant(self):
        c = Tensor([1.0, 2.0])
        x = Tensor([1.0, 1.0], requires_grad=True)
        T.reduce_sum(c * x).backward()
        assert c.grad is None

    def test_tape_is_consumed(self):
        x = Tensor(2.0, requires_grad=True)
        y = T.exp(x) * 2.0
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_tape_order_is_topological(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.reduce_sum(T.tanh(x * 2.0) + T.square(x))
        tape = T.build_tape(loss)
        pos = {id(n): i for i, n in enumerate(tape)}
        for node in tape:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert len(pos) == len(tape)

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad


def composed(params, data):
    """A scalar built from most of the op set."""
    w1, w2, b = params
    h = T.silu(T.matmul(data, w1) + b)
    a = T.tanh(h) * T.sigmoid(h) + T.celu(h - 0.5)
    z = T.concat([a, T.square(h)], axis=1)
    s = T.sqrt(T.reduce_sum(T.square(z), axis=1) + 1.0)
    r = T.reduce_max(T.matmul(z, w2), axis=1)
    return T.reduce_mean(T.log(s) + T.exp(r * 0.1) / (s + 1.0))


def _problem(seed):
    rng = np.random.default_rng(seed)
    data = Tensor(rng.standard_normal((4, 3)))
    shapes = [(3, 5), (10, 2), (5,)]
    return data, [rng.standard_normal(s) for s in shapes]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_composed_gradients_match_finite_differences(seed):
    data, values = _problem(seed)
    params = [Tensor(v.copy(), requires_grad=True) for v in values]
    composed(params, data).backward()
    for i, p in enumerate(params):

        def f(pv, i=i):
            ps = [Tensor(v) for v in values]
            ps[i] = Tensor(pv)
            return float(composed(ps, data).data)

        assert grad_close(p.grad, finite_diff_grad(f, values[i], h=1e-5))


def test_backward_leaves_forward_values_unchanged():
    data, values = _problem(3)
    params = [Tensor(v.copy(), requires_grad=True) for v in values]
    loss = composed(params, data)
    before = loss.item()
    loss.backward()
    assert loss.item() == before
    for p, v in zip(params, values):
        np.testing.assert_array_equal(p.data, v)


def test_gradients_are_bit_identical_across_runs():
    grads = []
    for _ in range(2):
        data, values = _problem(9)
        params = [Tensor(v.copy(), requires_grad=True) for v in values]
        composed(params, data).backward()
        grads.append([p.grad.copy() for p in params])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_segment_sum_and_take_rows_are_adjoint(rng):
    t = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 3, 1, 0])
    rows = T.take_rows(t, idx)
    w = rng.standard_normal((6, 3))
    T.reduce_sum(rows * w).backward()
    expected = np.zeros((4, 3))
    np.add.at(expected, idx, w)
    np.testing.assert_allclose(t.grad, expected)
    s = T.segment_sum(Tensor(w), idx, 5)
    np.testing.assert_allclose(s.data[:4], expected)
    np.testing.assert_array_equal(s.data[4], 0.0)
