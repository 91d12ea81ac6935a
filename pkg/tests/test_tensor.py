"""Tensor engine semantics and gradient correctness."""

import math

import numpy as np
import pytest

from credit_migration import tensor as tt
from credit_migration.tensor import GraphError, ShapeError, Tensor

from helpers import check_gradients, max_rel_error, numeric_gradient


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tt.matmul(a, b).data, b.data)

    def test_annihilator(self):
        a = Tensor(np.eye(2))
        z = Tensor(np.zeros((2, 3)))
        np.testing.assert_array_equal(tt.matmul(a, z).data, np.zeros((2, 3)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        for m, k, n in [(3, 2, 4), (1, 5, 1), (8, 8, 8), (2, 7, 3)]:
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            expected = np.zeros((m, n))
            for i in range(m):
                for j in range(n):
                    for p in range(k):
                        expected[i, j] += a[i, p] * b[p, j]
            got = tt.matmul(Tensor(a), Tensor(b)).data
            assert np.max(np.abs(got - expected)) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(err.value)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 3, 4))
        w = rng.normal(size=(4, 2))
        batched = tt.matmul(Tensor(a), Tensor(w)).data
        for i in range(5):
            single = tt.matmul(Tensor(a[i]), Tensor(w)).data
            np.testing.assert_allclose(batched[i], single, atol=1e-15)

    def test_batched_both_matches_per_sample(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 2, 3))
        b = rng.normal(size=(4, 3, 5))
        batched = tt.matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(
                batched[i], tt.matmul(Tensor(a[i]), Tensor(b[i])).data, atol=1e-15
            )


class TestSoftmaxRows:
    def test_uniform_input_gives_uniform_output(self):
        out = tt.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    @pytest.mark.parametrize("c", [-1000.0, -1.0, 0.0, 3.5, 1000.0])
    def test_two_element_closed_form(self, c):
        out = tt.softmax_rows(Tensor([[c, c + math.log(2.0)]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-9)

    def test_large_values_do_not_overflow(self):
        out = tt.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 9)) * 10
        out = tt.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-9)
        for c in (-250.0, 0.125, 42.0):
            shifted = tt.softmax_rows(Tensor(x + c)).data
            assert np.max(np.abs(shifted - out)) < 1e-9


class TestLayerNorm:
    def _ones_bias(self, n):
        return Tensor(np.ones(n), requires_grad=True), Tensor(np.zeros(n), requires_grad=True)

    def test_constant_row_collapses_to_zero(self):
        gain, bias = self._ones_bias(3)
        out = tt.layer_norm(Tensor([[5.0, 5.0, 5.0]]), gain, bias).data
        np.testing.assert_allclose(out, [[0.0, 0.0, 0.0]], atol=1e-12)

    def test_two_element_closed_form(self):
        gain, bias = self._ones_bias(2)
        out = tt.layer_norm(Tensor([[1.0, -1.0]]), gain, bias).data
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out, [[expected, -expected]], atol=1e-12)

    def test_zero_gain_leaves_only_bias(self):
        gain = Tensor(np.zeros(4))
        bias = Tensor(np.full(4, 7.0))
        rng = np.random.default_rng(4)
        out = tt.layer_norm(Tensor(rng.normal(size=(3, 4))), gain, bias).data
        np.testing.assert_allclose(out, np.full((3, 4), 7.0), atol=1e-12)

    def test_pre_affine_rows_are_normalized(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(10, 16)) * 3 + 2
        gain, bias = self._ones_bias(16)
        out = tt.layer_norm(Tensor(x), gain, bias).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4

    def test_degenerate_row_rejected(self):
        gain, bias = self._ones_bias(1)
        with pytest.raises(ShapeError):
            tt.layer_norm(Tensor([[1.0]]), gain, bias)


class TestElementwiseAndStructural:
    def test_relu_definition(self):
        out = tt.relu(Tensor([[-1.0, 0.0, 2.0]])).data
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_transpose_involution(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(tt.transpose(tt.transpose(Tensor(x))).data, x)

    def test_transpose_requires_matrix(self):
        with pytest.raises(ShapeError):
            tt.transpose(Tensor([1.0, 2.0]))

    def test_concat_matches_index_bookkeeping(self):
        rng = np.random.default_rng(7)
        parts = [rng.normal(size=(3, d)) for d in (2, 4, 3)]
        out = tt.concat_last_dim([Tensor(p) for p in parts]).data
        assert out.shape == (3, 9)
        offset = 0
        for p in parts:
            np.testing.assert_array_equal(out[:, offset: offset + p.shape[1]], p)
            offset += p.shape[1]

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tt.concat_last_dim([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    def test_add_suffix_broadcast(self):
        x = Tensor(np.zeros((2, 3, 4)))
        bias = Tensor(np.arange(4.0))
        out = tt.add(x, bias).data
        np.testing.assert_array_equal(out[1, 2], np.arange(4.0))

    def test_add_rejects_non_suffix(self):
        with pytest.raises(ShapeError):
            tt.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_sum_axes(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = tt.sum(Tensor(x), axes=(1, 2)).data
        np.testing.assert_array_equal(out, x.sum(axis=(1, 2)))
        assert tt.sum(Tensor(x)).data.shape == ()

    def test_scale_and_subtract(self):
        x = Tensor([[1.0, -2.0]])
        np.testing.assert_array_equal(tt.scale(x, -0.5).data, [[-0.5, 1.0]])
        np.testing.assert_array_equal(tt.subtract(x, x).data, [[0.0, 0.0]])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tt.backward(tt.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mean_of_square_gradient(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(3, 4))
        x = Tensor(data, requires_grad=True)
        tt.backward(tt.mean_all(tt.multiply(x, x)))
        np.testing.assert_allclose(x.grad, 2.0 * data / data.size, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(GraphError):
            tt.backward(tt.relu(x))

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tt.sum(x)
        tt.backward(loss)
        with pytest.raises(GraphError):
            tt.backward(loss)

    def test_stale_gradient_rejected_then_reset_allows(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tt.backward(tt.sum(x))
        with pytest.raises(GraphError):
            tt.backward(tt.sum(x))
        tt.reset_gradients([x])
        tt.backward(tt.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_detached_tensor_gets_no_gradient(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        frozen = Tensor(np.full((2, 2), 3.0))
        tt.backward(tt.sum(tt.multiply(x, frozen)))
        assert frozen.grad is None
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))

    def test_reused_tensor_accumulates_within_one_pass(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        tt.backward(tt.sum(tt.add(x, x)))
        np.testing.assert_array_equal(x.grad, np.full(2, 2.0))

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(9)
            x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
            loss = tt.mean_all(tt.relu(tt.matmul(x, w)))
            tt.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


class TestGradientsAgainstFiniteDifferences:
    def test_every_operation(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        gain = Tensor(rng.normal(size=(5,)) + 1.5, requires_grad=True)
        bias = Tensor(rng.normal(size=(5,)), requires_grad=True)
        mixer = Tensor(rng.normal(size=(3, 5)))

        cases = {
            "matmul": lambda: tt.sum(tt.matmul(a, b)),
            "softmax_rows": lambda: tt.mean_all(tt.multiply(tt.softmax_rows(c), mixer)),
            "layer_norm": lambda: tt.mean_all(tt.multiply(tt.layer_norm(c, gain, bias), mixer)),
            "relu": lambda: tt.sum(tt.relu(c)),
            "add_bias": lambda: tt.mean_all(tt.multiply(tt.add(c, bias), mixer)),
            "subtract": lambda: tt.sum(tt.multiply(tt.subtract(c, mixer), c)),
            "scale": lambda: tt.sum(tt.scale(c, -2.5)),
            "transpose": lambda: tt.sum(tt.matmul(tt.transpose(a), c)),
            "concat": lambda: tt.mean_all(tt.concat_last_dim([a, c])),
            "log": lambda: tt.sum(tt.log(tt.add(tt.relu(c), Tensor(1.0)))),
            "sum_axes": lambda: tt.mean_all(tt.sum(tt.multiply(c, c), axes=(1,))),
        }
        all_leaves = (a, b, c, gain, bias)
        for name, build in cases.items():
            involved = [t for t in all_leaves if _feeds(build, t)]
            worst = check_gradients(build, involved)
            assert worst < 1e-4, name
            tt.reset_gradients(all_leaves)

    def test_composite_graph(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w1 = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        gain = Tensor(np.ones(6), requires_grad=True)
        bias = Tensor(np.zeros(6), requires_grad=True)

        def build():
            h = tt.layer_norm(tt.relu(tt.matmul(x, w1)), gain, bias)
            p = tt.softmax_rows(tt.matmul(h, w2))
            return tt.mean_all(tt.multiply(p, p))

        check_gradients(build, [x, w1, w2, gain, bias])

    def test_batched_composite_graph(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

        def build():
            q = tt.matmul(x, w)
            scores = tt.scale(tt.matmul(q, tt.transpose(q)), 0.5)
            att = tt.matmul(tt.softmax_rows(scores), q)
            return tt.mean_all(tt.multiply(att, att))

        check_gradients(build, [x, w])


def _feeds(build, leaf):
    """True when `leaf` participates in the graph built by `build`."""
    loss = build()
    stack = [loss]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node is leaf:
            return True
        stack.extend(node._parents)
    return False
