"""Tensor-engine tests: forward values against independent oracles and every
backward rule against central finite differences."""

import numpy as np
import pytest

from binpoint import autodiff as ad
from binpoint.autodiff import (
    BatchNormState,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    Tensor,
    backward,
)


def matmul_reference(a, b):
    """Hand-rolled triple loop; the independent oracle for matmul."""
    n, m = a.shape
    m2, k = b.shape
    assert m == m2
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for l in range(m):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grad(build_loss, params, rtol=1e-4):
    """Analytic grads vs central differences, relative error < rtol."""
    loss = build_loss()
    backward(loss)
    for p in params:
        num = finite_difference(lambda: float(build_loss().data), p.data)
        denom = max(np.abs(num).max(), np.abs(p.grad).max(), 1e-8)
        assert np.abs(p.grad - num).max() / denom < rtol, (
            f"gradient mismatch: analytic {p.grad}, numeric {num}"
        )


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_cancellation(self):
        out = ad.matmul(Tensor([[1.0, -1.0]]), Tensor([[1.0], [1.0]]))
        assert out.data[0, 0] == 0.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_reference(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])


class TestBatchNorm:
    def test_constant_channel_returns_beta(self):
        x = Tensor(np.full((6, 3), 2.5))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.array([1.0, -2.0, 0.5]))
        out = ad.batch_norm(x, gamma, beta, BatchNormState.create(3), mode="train")
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (6, 3)), atol=1e-6)

    def test_standardizes_large_sample(self):
        # Monte Carlo: N(3, 4) in, ~N(0, 1) out with unit gamma / zero beta
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(3.0, 2.0, size=(100_000, 2)))
        out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            BatchNormState.create(2), mode="train")
        assert np.abs(out.data.mean(axis=0)).max() < 0.05
        assert np.abs(out.data.std(axis=0) - 1.0).max() < 0.05

    def test_eval_affine_identity(self):
        state = BatchNormState.create(1)
        out = ad.batch_norm(Tensor([[3.0], [3.0]]), Tensor([2.0]), Tensor([1.0]),
                            state, mode="eval")
        np.testing.assert_allclose(out.data, 7.0, atol=1e-4)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            ad.batch_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)),
                          Tensor(np.zeros(2)), BatchNormState.create(2), mode="train")

    def test_running_stats_converge(self):
        rng = np.random.default_rng(5)
        state = BatchNormState.create(1)
        gamma, beta = Tensor(np.ones(1)), Tensor(np.zeros(1))
        for _ in range(300):
            x = Tensor(rng.normal(2.0, 3.0, size=(64, 1)))
            ad.batch_norm(x, gamma, beta, state, mode="train")
        assert abs(state.running_mean[0] - 2.0) < 0.3
        assert abs(state.running_var[0] - 9.0) < 1.5

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = Tensor(rng.standard_normal(4), requires_grad=True)
        state = BatchNormState.create(4)
        state.running_mean = rng.standard_normal(4)
        state.running_var = rng.uniform(0.5, 2.0, 4)

        def loss():
            fresh = BatchNormState(state.running_mean.copy(), state.running_var.copy())
            out = ad.batch_norm(x, gamma, beta, fresh, mode=mode)
            return ad.sum_all(ad.mul(out, out))

        check_grad(loss, [x, gamma, beta])


class TestHardtanh:
    def test_values_and_gradient_window(self):
        x = Tensor(np.array([[0.5, 1.5, -2.0]]), requires_grad=True)
        out = ad.hardtanh(x)
        np.testing.assert_array_equal(out.data, [[0.5, 1.0, -1.0]])
        backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_gradient_matches_finite_differences_off_kink(self):
        rng = np.random.default_rng(23)
        vals = rng.uniform(-2.0, 2.0, size=(5, 4))
        vals[np.abs(np.abs(vals) - 1.0) < 0.05] = 0.5  # keep clear of the kinks
        x = Tensor(vals, requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.hardtanh(x)), [x], rtol=1e-4)


class TestPooling:
    def test_single_row_identity(self):
        x = Tensor([[1.0, -2.0, 3.0]])
        for kind in ("max", "avg"):
            np.testing.assert_array_equal(ad.pool_points(x, kind).data, x.data)

    def test_max_and_avg_values(self):
        x = Tensor([[1.0], [3.0], [2.0]])
        assert ad.pool_points(x, "max").data[0, 0] == 3.0
        assert ad.pool_points(x, "avg").data[0, 0] == 2.0

    def test_max_tie_routes_to_first_row(self):
        x = Tensor(np.array([[5.0], [1.0], [5.0]]), requires_grad=True)
        backward(ad.sum_all(ad.pool_points(x, "max")))
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_empty_input_rejected(self):
        with pytest.raises(DimensionError):
            ad.pool_points(Tensor(np.zeros((0, 3))), "max")

    def test_max_dominates_avg(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            x = Tensor(rng.standard_normal((rng.integers(1, 20), 5)))
            assert np.all(ad.pool_points(x, "max").data >= ad.pool_points(x, "avg").data)

    def test_segment_pool_matches_per_block_pooling(self):
        rng = np.random.default_rng(31)
        x = rng.standard_normal((12, 3))
        out = ad.segment_pool(Tensor(x), 4, "max")
        expect = np.stack([x[i * 4 : (i + 1) * 4].max(axis=0) for i in range(3)])
        np.testing.assert_array_equal(out.data, expect)

    def test_avg_gradients(self):
        rng = np.random.default_rng(37)
        x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.segment_pool(x, 3, "avg")), [x])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        np.testing.assert_allclose(float(loss.data), np.log(4.0), atol=1e-12)

    def test_confident_correct_is_near_zero(self):
        z = np.zeros((1, 5))
        z[0, 2] = 20.0
        loss = ad.softmax_cross_entropy(Tensor(z), [2])
        assert float(loss.data) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradient(self):
        rng = np.random.default_rng(41)
        z = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        check_grad(lambda: ad.softmax_cross_entropy(z, [1, 0, 4]), [z], rtol=1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_linear_grad(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w = Tensor(np.array([[0.5], [0.25]]), requires_grad=True)
        backward(ad.sum_all(ad.matmul(x, w)))
        np.testing.assert_array_equal(w.grad, x.data.T @ np.ones((2, 1)))

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones((2, 2)), requires_grad=True))

    def test_shared_subexpression_accumulates_once_per_use(self):
        x = Tensor(np.array([[2.0]]), requires_grad=True)
        y = ad.mul(x, x)  # x^2: grad 2x
        backward(ad.sum_all(y))
        np.testing.assert_allclose(x.grad, [[4.0]])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(1234)
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            loss = ad.softmax_cross_entropy(ad.matmul(ad.hardtanh(x), w), [0, 1, 0, 1])
            backward(loss)
            return float(loss.data), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


class TestPointOps:
    def test_input_transform_applies_per_segment_matrix(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((8, 3))
        zs = rng.standard_normal((2, 9))
        out = ad.input_transform(Tensor(x), Tensor(zs), 4)
        for b in range(2):
            np.testing.assert_allclose(
                out.data[b * 4 : (b + 1) * 4], x[b * 4 : (b + 1) * 4] @ zs[b].reshape(3, 3)
            )

    def test_input_transform_gradients(self):
        rng = np.random.default_rng(47)
        x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        zs = Tensor(rng.standard_normal((2, 9)), requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.mul(y := ad.input_transform(x, zs, 3), y)), [x, zs])

    def test_orthogonality_penalty_values(self):
        eye = np.eye(3).reshape(1, 9)
        assert float(ad.orthogonality_penalty(Tensor(eye)).data) == 0.0
        # z = 2I: ||I - 4I||^2 = 9 * 3 = 27
        assert float(ad.orthogonality_penalty(Tensor(2 * eye)).data) == 27.0
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0],
                        [0, 0, 1.0]]).reshape(1, 9)
        assert float(ad.orthogonality_penalty(Tensor(rot)).data) < 1e-12

    def test_orthogonality_penalty_gradient(self):
        rng = np.random.default_rng(53)
        zs = Tensor(rng.standard_normal((3, 9)), requires_grad=True)
        check_grad(lambda: ad.orthogonality_penalty(zs), [zs])


class TestElementwise:
    def test_add_broadcast_and_grads(self):
        rng = np.random.default_rng(59)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.mul(y := ad.add(x, b), y)), [x, b])

    def test_scale_by_learnable_scalar(self):
        alpha = Tensor(np.asarray(2.0), requires_grad=True)
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        backward(ad.sum_all(ad.scale_by(alpha, x)))
        np.testing.assert_allclose(float(alpha.grad), x.data.sum())
        np.testing.assert_allclose(x.grad, np.full((2, 2), 2.0))

    def test_relu_sub_transpose_grads(self):
        rng = np.random.default_rng(61)
        a = Tensor(rng.standard_normal((3, 4)) + 0.1, requires_grad=True)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        check_grad(lambda: ad.sum_all(ad.relu(ad.sub(a, ad.transpose(b)))), [a, b])
