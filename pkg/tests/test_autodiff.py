import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mhfilm import autodiff as ad
from mhfilm.autodiff import Tensor
from mhfilm.errors import BackwardError, ConfigError, DimensionError, DomainError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def fd(f, shape, rng, h=1e-5, scale=1.0):
    x = Tensor(rng.normal(size=shape) * scale)
    return ad.finite_diff_check(f, x, h=h)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_row_by_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_both_operands(self, seed):
        rng = np.random.default_rng(seed)
        b = Tensor(rng.normal(size=(3, 3)))
        a = Tensor(rng.normal(size=(3, 3)))
        assert ad.finite_diff_check(lambda x: ad.matmul(x, b).sum(), a) < 1e-4
        assert ad.finite_diff_check(lambda x: ad.matmul(a, x).sum(), b) < 1e-4

    def test_batched_leading_axes(self, rng):
        a = rng.normal(size=(2, 4, 3))
        b = rng.normal(size=(3, 5))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)
        assert fd(lambda x: ad.tanh(ad.matmul(x, Tensor(b))).sum(), (2, 4, 3), rng) < 1e-4


class TestConv2d:
    def test_unit_1x1_is_identity(self, rng):
        x = rng.normal(size=(1, 4, 5))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_counts_neighbours(self):
        out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 1, 1] == 9
        assert out.data[0, 0, 0] == out.data[0, 2, 2] == 4
        assert out.data[0, 0, 1] == 6

    def test_output_extent_formula(self):
        out = ad.conv2d(Tensor(np.zeros((3, 28, 28))), Tensor(np.zeros((8, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (8, 14, 14)

    def test_non_positive_extent(self):
        with pytest.raises(DimensionError, match="non-positive"):
            ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_against_loop(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_grad_kernel_input_bias(self, rng, stride):
        x = Tensor(rng.normal(size=(2, 4, 4)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        w = Tensor(rng.normal(size=(3, 4 // stride, 4 // stride)))

        def loss(x_, k_, b_):
            return (ad.conv2d(x_, k_, b_, stride=stride, padding=1) * w).sum()

        assert ad.finite_diff_check(lambda t: loss(x, t, b), k) < 1e-4
        assert ad.finite_diff_check(lambda t: loss(t, k, b), x) < 1e-4
        assert ad.finite_diff_check(lambda t: loss(x, k, t), b) < 1e-4

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        k = Tensor(rng.normal(size=(2, 2, 3, 3)))
        batched = ad.conv2d(Tensor(x), k, padding=1).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], ad.conv2d(Tensor(x[n]), k, padding=1).data, atol=1e-13)


class TestUnary:
    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_symmetry_points(self):
        assert ad.tanh(Tensor(0.0)).item() == 0.0
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_tanh_derivative(self):
        x = Tensor(np.array([0.3]), requires_grad=True)
        ad.backward(ad.tanh(x).sum())
        assert x.grad[0] == pytest.approx(1 - math.tanh(0.3) ** 2, rel=1e-12)
        assert ad.finite_diff_check(lambda t: ad.tanh(t).sum(), Tensor([0.3]), h=1e-5) < 1e-6

    def test_log_domain_error_names_index(self):
        with pytest.raises(DomainError, match=r"\(1,\)"):
            ad.log(Tensor([1.0, -2.0]))

    def test_sigmoid_stable_at_extremes(self):
        y = ad.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[1] == 1.0

    @pytest.mark.parametrize("f", ["relu", "tanh", "sigmoid", "log", "neg"])
    @pytest.mark.parametrize("seed", range(5))
    def test_fd(self, f, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=6)
        if f == "log":
            x = np.abs(x) + 0.5
        if f == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        assert ad.finite_diff_check(lambda t: (ad.unary_map(t, f) * Tensor(np.arange(1.0, 7.0))).sum(), Tensor(x)) < 1e-4

    def test_unknown_function(self):
        with pytest.raises(ValueError):
            ad.unary_map(Tensor([1.0]), "cube")


class TestBinary:
    def test_hadamard(self):
        assert ad.binary_map(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), "hadamard").data.tolist() == [3, 8]

    def test_add_zeros(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(ad.binary_map(Tensor(x), Tensor(np.zeros((2, 3))), "add").data, x)

    def test_per_channel_broadcast(self):
        gamma = Tensor(np.array([2.0]).reshape(1, 1, 1))
        out = ad.binary_map(Tensor(np.ones((1, 2, 2))), gamma, "hadamard")
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 2.0))

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @pytest.mark.parametrize("f", ["add", "sub", "hadamard"])
    def test_broadcast_adjoint_sums(self, rng, f):
        a = Tensor(rng.normal(size=(3, 2, 2)))
        b = Tensor(rng.normal(size=(3, 1, 1)))
        w = Tensor(rng.normal(size=(3, 2, 2)))
        assert ad.finite_diff_check(lambda t: (ad.binary_map(a, t, f) * w).sum(), b) < 1e-4
        assert ad.finite_diff_check(lambda t: (ad.binary_map(t, b, f) * w).sum(), a) < 1e-4


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], rtol=1e-14)

    def test_large_inputs(self):
        big = ad.softmax(Tensor([1000.0, 1000.5])).data
        assert np.all(np.isfinite(big))
        np.testing.assert_array_equal(big, ad.softmax(Tensor([0.0, 0.5])).data)

    def test_mask_zeroes_entries(self):
        y = ad.softmax(Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
        assert y[1] == 0.0
        assert y.sum() == pytest.approx(1.0)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            ad.softmax(Tensor(np.ones((2, 2))), axis=2)

    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_normalized_and_shift_invariant(self, x, c):
        y = ad.softmax(Tensor(x), axis=1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ad.softmax(Tensor(x + c), axis=1).data, y, atol=1e-12)

    def test_grad(self, rng):
        w = Tensor(rng.normal(size=(2, 4)))
        assert fd(lambda t: (ad.softmax(t, axis=1) * w).sum(), (2, 4), rng) < 1e-4


class TestLayerNorm:
    def test_constant_vector(self):
        out = ad.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_values(self):
        out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-3)

    def test_grad_all_operands(self, rng):
        g = Tensor(rng.normal(size=8))
        b = Tensor(rng.normal(size=8))
        w = Tensor(rng.normal(size=8))
        x = Tensor(rng.normal(size=8))
        assert ad.finite_diff_check(lambda t: (ad.layer_norm(t, g, b) * w).sum(), x) < 1e-4
        assert ad.finite_diff_check(lambda t: (ad.layer_norm(x, t, b) * w).sum(), g) < 1e-4
        assert ad.finite_diff_check(lambda t: (ad.layer_norm(x, g, t) * w).sum(), b) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.layer_norm(Tensor(np.ones(3)), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestBatchNorm:
    def test_identity_statistics_eval(self, rng):
        x = rng.normal(size=(2, 3, 3))
        out = ad.frozen_batch_norm(Tensor(x), np.zeros(2), np.ones(2), training=False)
        np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-14)

    def test_constant_channel_zero(self):
        x = np.ones((2, 3, 3))
        x[1] = np.arange(9).reshape(3, 3)
        out = ad.frozen_batch_norm(Tensor(x), np.zeros(2), np.ones(2), training=True)
        np.testing.assert_array_equal(out.data[0], 0.0)

    def test_running_update(self):
        x = np.array([[[1.0, 3.0]], [[2.0, 2.0]]])  # C=2, H=1, W=2
        rm, rv = np.zeros(2), np.ones(2)
        ad.frozen_batch_norm(Tensor(x), rm, rv, training=True)
        np.testing.assert_allclose(rm, [0.1 * 2.0, 0.1 * 2.0])
        np.testing.assert_allclose(rv, [0.9 + 0.1 * 1.0, 0.9 + 0.1 * 0.0])

    def test_grad_train_mode(self, rng):
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        f = lambda t: (ad.frozen_batch_norm(t, np.zeros(2), np.ones(2), training=True) * w).sum()  # noqa: E731
        assert fd(f, (3, 2, 3, 3), rng) < 1e-4


class TestReduceConcat:
    def test_mean_sum(self):
        assert ad.reduce(Tensor(np.ones((2, 2))), "mean").item() == 1.0
        assert ad.reduce(Tensor([1.0, 2.0, 3.0]), "sum").item() == 6.0

    def test_mean_pool_loop(self, rng):
        x = rng.normal(size=(3, 4, 5))
        pooled = ad.reduce(Tensor(x), "mean", axes=(1, 2)).data
        for c in range(3):
            assert pooled[c] == pytest.approx(sum(x[c, i, j] for i in range(4) for j in range(5)) / 20, rel=1e-12)

    def test_duplicate_axes(self):
        with pytest.raises(DimensionError):
            ad.reduce(Tensor(np.ones((2, 2))), "sum", axes=(0, 0))

    def test_mean_grad_uniform(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        ad.backward(ad.reduce(x, "mean"))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))

    def test_concat(self):
        out = ad.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
        assert out.data.tolist() == [[1, 3], [2, 4]]

    def test_concat_empty(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(ad.concat([Tensor(x), Tensor(np.zeros((2, 0)))], axis=1).data, x)

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))], axis=1)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=4), st.integers(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, widths, axis):
        rng = np.random.default_rng(len(widths))
        parts = [rng.normal(size=(3, w) if axis == 1 else (w, 3)) for w in widths]
        joined = ad.concat([Tensor(p) for p in parts], axis=axis)
        start = 0
        for p in parts:
            w = p.shape[axis]
            piece = ad.index(joined, (slice(None), slice(start, start + w)) if axis == 1 else slice(start, start + w))
            np.testing.assert_array_equal(piece.data, p)
            start += w

    def test_concat_grad(self, rng):
        a = Tensor(rng.normal(size=(2, 2)))
        w = Tensor(rng.normal(size=(2, 5)))
        assert fd(lambda t: (ad.concat([a, t], axis=1) * w).sum(), (2, 3), rng) < 1e-4


class TestEmbedding:
    def test_lookup(self):
        table = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert ad.embedding_lookup(table, [0]).data.tolist() == [[1.0, 2.0]]

    def test_repeated_index_grad_sums(self, rng):
        table = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        g = rng.normal(size=(2, 3))
        ad.backward((ad.embedding_lookup(table, [1, 1]) * Tensor(g)).sum())
        np.testing.assert_allclose(table.grad[1], g[0] + g[1])
        np.testing.assert_array_equal(table.grad[0], 0.0)

    def test_empty(self):
        out = ad.embedding_lookup(Tensor(np.ones((4, 3))), [])
        assert out.shape == (0, 3)

    def test_out_of_range_names_position(self):
        with pytest.raises(IndexError, match="position 2"):
            ad.embedding_lookup(Tensor(np.ones((4, 3))), [0, 1, 9])


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert ad.dropout(x, 0.5, False, None) is x

    def test_p_zero_identity(self, rng):
        x = rng.normal(size=10)
        np.testing.assert_array_equal(ad.dropout(Tensor(x), 0.0, True, rng).data, x)

    def test_survivor_fraction(self):
        out = ad.dropout(Tensor(np.ones(10_000)), 0.5, True, np.random.default_rng(3)).data
        assert abs(np.mean(out > 0) - 0.5) <= 0.03
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_p(self, p):
        with pytest.raises(ConfigError):
            ad.dropout(Tensor(np.ones(3)), p, True, np.random.default_rng(0))

    def test_seeded_reproducible(self):
        a = ad.dropout(Tensor(np.ones(50)), 0.3, True, np.random.default_rng(9)).data
        b = ad.dropout(Tensor(np.ones(50)), 0.3, True, np.random.default_rng(9)).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sum_all_ones(self):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        ad.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward((x * x).sum())
        assert x.grad.tolist() == [2.0, 4.0]

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            ad.backward(x * x)

    def test_twice_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        ad.backward(loss)
        with pytest.raises(BackwardError):
            ad.backward(loss)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        ad.backward((y + y * x).sum())
        assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)

    def test_tape_is_topological(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        loss = ad.tanh(ad.relu(x) * x).sum()
        tape = ad.Tape.from_root(loss)
        pos = {id(t): i for i, t in enumerate(tape.records)}
        for t in tape.records:
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) in pos:
                        assert pos[id(p)] < pos[id(t)]

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * x
        assert y._node is None and not y.requires_grad


class TestFiniteDiff:
    def test_sum_is_exact(self, rng):
        # integer data and a power-of-two step keep every difference exact
        x = Tensor(rng.integers(-9, 9, size=(3, 2)).astype(float))
        assert ad.finite_diff_check(lambda t: t.sum(), x, h=2.0 ** -12) == 0.0

    def test_tanh_self_test(self, rng):
        assert fd(lambda t: ad.tanh(t).sum(), (6,), rng) < 1e-6

    def test_corrupted_gradient_detected(self, rng):
        x = Tensor(rng.normal(size=5))
        bad = 1 - np.tanh(x.data) ** 2
        bad[2] *= -1
        assert ad.finite_diff_check(lambda t: ad.tanh(t).sum(), x, grad=bad) > 1e-2

    def test_relative_error_floor(self):
        assert ad.relative_error(0.0, 1e-10) == pytest.approx(1e-2)

    def test_kink_safe_steps_off_relu_corner(self):
        x = Tensor([1e-6])
        with ad.no_grad():
            plain = ad.numerical_grad(lambda: ad.relu(x).item(), x, 1e-4, [(0,)])[0]
            safe = ad.kink_safe_numerical_grad(lambda: ad.relu(x).item(), x, [(0,)], h=1e-4)[0]
        assert plain == pytest.approx(0.505, rel=1e-6)
        assert safe == pytest.approx(1.0, rel=1e-9)


class TestDeterminism:
    def test_op_sequence_bitwise(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
            k = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
            y = ad.dropout(ad.relu(ad.conv2d(x, k, padding=1)), 0.5, True, rng)
            loss = ad.softmax(y.reshape(2, -1), axis=1).mean()
            ad.backward(loss)
            return y.data.tobytes() + k.grad.tobytes()

        assert run() == run()
