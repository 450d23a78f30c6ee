"""Binarization tests: STE semantics, bit-packing round trips, kernel
bit-exactness against the float GEMM oracle, and scale recovery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binpoint.autodiff import DimensionError, Tensor, backward, scale, sum_all
from binpoint.binary import (
    BiLinearLayer,
    EncodingError,
    InitializationError,
    BitMatrix,
    hard_sign,
    lsr_init,
    pack,
    sign_ste,
    unpack,
    xnor_gemm,
)


class TestSignSTE:
    def test_zero_maps_to_plus_one(self):
        out = sign_ste(Tensor(np.array([[0.0]])))
        assert out.data[0, 0] == 1.0

    def test_gradient_window_exact(self):
        # nonzero gradient iff |x| < 1, with upstream gradient 2
        x = Tensor(np.array([[0.5, 1.5, -0.99, -1.0, 1.0]]), requires_grad=True)
        backward(sum_all(scale(sign_ste(x), 2.0)))
        np.testing.assert_array_equal(x.grad, [[2.0, 0.0, 2.0, 0.0, 0.0]])

    def test_forward_values(self):
        x = Tensor(np.array([[-3.0, -0.1, 0.0, 0.1, 3.0]]))
        np.testing.assert_array_equal(sign_ste(x).data, [[-1.0, -1.0, 1.0, 1.0, 1.0]])


class TestPacking:
    def test_all_plus_one_row(self):
        b = pack(np.ones((1, 64)))
        assert b.words.shape == (1, 1)
        assert b.words[0, 0] == np.uint64(0xFFFF_FFFF_FFFF_FFFF)

    def test_all_minus_one_with_padding(self):
        b = pack(-np.ones((1, 65)))
        assert b.words.shape == (1, 2)
        assert b.words[0, 0] == 0 and b.words[0, 1] == 0

    def test_padding_bits_are_zero(self):
        rng = np.random.default_rng(2)
        m = hard_sign(rng.standard_normal((5, 70)))
        b = pack(m)
        # bits 6..63 of the second word must be zero
        assert np.all((b.words[:, 1] >> np.uint64(6)) == 0)

    def test_packed_size(self):
        b = pack(np.ones((37, 129)))
        assert b.packed_bytes == 37 * 3 * 8

    def test_non_binary_entry_rejected(self):
        with pytest.raises(EncodingError):
            pack(np.array([[1.0, 0.5]]))

    def test_round_trip_many_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            rows = int(rng.integers(1, 40))
            cols = int(rng.integers(1, 140))
            m = hard_sign(rng.standard_normal((rows, cols)))
            np.testing.assert_array_equal(unpack(pack(m)), m)

    @given(st.integers(1, 9), st.integers(1, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, rows, cols, seed):
        m = hard_sign(np.random.default_rng(seed).standard_normal((rows, cols)))
        np.testing.assert_array_equal(unpack(pack(m)), m)

    def test_serialization_round_trip(self):
        m = hard_sign(np.random.default_rng(5).standard_normal((7, 100)))
        b = pack(m)
        b2 = BitMatrix.frombytes(b.tobytes(), b.rows, b.cols)
        np.testing.assert_array_equal(unpack(b2), m)


class TestXnorGemm:
    def test_identical_row_and_column(self):
        for m in (1, 7, 64, 65, 200):
            v = hard_sign(np.random.default_rng(m).standard_normal((1, m)))
            out = xnor_gemm(pack(v), pack(v.T))
            assert out[0, 0] == m

    def test_hand_dot_product(self):
        a = pack(np.array([[1.0, -1.0, 1.0]]))
        w = pack(np.array([[1.0], [1.0], [-1.0]]))
        assert xnor_gemm(a, w)[0, 0] == -1

    def test_matches_float_gemm(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            r = np.random.default_rng(seed)
            a = hard_sign(r.standard_normal((64, 256)))
            w = hard_sign(r.standard_normal((256, 32)))
            out = xnor_gemm(pack(a), pack(w))
            np.testing.assert_array_equal(out, (a @ w).astype(np.int64))

    def test_odd_shapes_match_float_gemm(self):
        for seed in range(20):
            r = np.random.default_rng(seed + 1000)
            n, m, k = r.integers(1, 90, size=3)
            a = hard_sign(r.standard_normal((n, m)))
            w = hard_sign(r.standard_normal((m, k)))
            np.testing.assert_array_equal(xnor_gemm(pack(a), pack(w)), (a @ w).astype(np.int64))

    def test_parity_matches_inner_dim(self):
        r = np.random.default_rng(9)
        for m in (3, 8, 17, 64):
            a = hard_sign(r.standard_normal((5, m)))
            w = hard_sign(r.standard_normal((m, 4)))
            out = xnor_gemm(pack(a), pack(w))
            assert np.all((out - m) % 2 == 0)
            assert out.min() >= -m and out.max() <= m

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            xnor_gemm(pack(np.ones((2, 8))), pack(np.ones((9, 2))))


class TestBiLinearLayer:
    def test_all_ones_gives_inner_width(self):
        layer = BiLinearLayer(8, 4, np.random.default_rng(0))
        layer.latent_w.data = np.full((8, 4), 0.3)
        out = layer.forward(Tensor(np.full((2, 8), 0.9)))
        np.testing.assert_array_equal(out.data, np.full((2, 4), 8.0))

    def test_deploy_matches_train_bit_for_bit(self):
        rng = np.random.default_rng(1)
        layer = BiLinearLayer(33, 17, rng)
        lsr_init(layer, rng.standard_normal((50, 33)))
        x = rng.standard_normal((20, 33))
        train_out = layer.forward(Tensor(x)).data
        layer.set_mode("deploy")
        deploy_out = layer.forward_deploy(x)
        np.testing.assert_array_equal(train_out, deploy_out)

    def test_alpha_gradient_matches_hand_computation(self):
        # fixed 2x3 @ 3x2 case: g_alpha = sum(g_Z * (B_a @ B_w)) with g_Z = 1
        layer = BiLinearLayer(3, 2, np.random.default_rng(2))
        layer.latent_w.data = np.array([[0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])
        x = np.array([[0.9, -0.9, 0.9], [-0.9, -0.9, 0.9]])
        ints = hard_sign(x) @ hard_sign(layer.latent_w.data)
        out = layer.forward(Tensor(x))
        backward(sum_all(out))
        np.testing.assert_allclose(float(layer.alpha.grad), ints.sum())

    def test_ste_flows_to_latent_weights_and_input(self):
        rng = np.random.default_rng(3)
        layer = BiLinearLayer(4, 3, rng)
        x = Tensor(rng.uniform(-0.5, 0.5, (5, 4)), requires_grad=True)
        backward(sum_all(layer.forward(x)))
        assert layer.latent_w.grad is not None and np.any(layer.latent_w.grad != 0)
        assert x.grad is not None and np.any(x.grad != 0)

    def test_clip_latent(self):
        layer = BiLinearLayer(4, 3, np.random.default_rng(4))
        layer.latent_w.data[0, 0] = 5.0
        layer.clip_latent()
        assert layer.latent_w.data.max() <= 1.0

    def test_output_std_grows_like_sqrt_m(self):
        # scale-distortion check: +/-1 inputs, m=256 -> output std ~ 16
        rng = np.random.default_rng(5)
        layer = BiLinearLayer(256, 64, rng, learnable_alpha=False)
        x = hard_sign(rng.standard_normal((500, 256)))
        out = layer.forward(Tensor(x))
        assert abs(out.data.std() - 16.0) < 1.0


class TestScaleRecovery:
    def test_unit_normal_alpha_near_one(self):
        rng = np.random.default_rng(6)
        layer = BiLinearLayer(256, 64, rng)
        layer.latent_w.data = rng.standard_normal((256, 64))
        lsr_init(layer, rng.standard_normal((1600, 256)))
        assert abs(float(layer.alpha.data) - 1.0) < 0.05

    def test_alpha_scales_with_weights(self):
        rng = np.random.default_rng(7)
        layer = BiLinearLayer(256, 64, rng)
        layer.latent_w.data = 0.5 * rng.standard_normal((256, 64))
        lsr_init(layer, rng.standard_normal((1600, 256)))
        assert abs(float(layer.alpha.data) - 0.5) < 0.05

    def test_constant_weights_match_columnsum_oracle(self):
        # W = c 1: float out = c * row-sums, so alpha = c * std(rowsum) / std(binarized)
        rng = np.random.default_rng(8)
        c, m, k = 0.7, 256, 16
        layer = BiLinearLayer(m, k, rng)
        layer.latent_w.data = np.full((m, k), c)
        x = rng.standard_normal((4000, m))
        expected = (c * x.sum(axis=1)).std() / (hard_sign(x) @ np.ones((m, k))).std()
        lsr_init(layer, x)
        np.testing.assert_allclose(float(layer.alpha.data), expected, rtol=1e-12)

    def test_recovered_std_within_ten_percent(self):
        rng = np.random.default_rng(9)
        layer = BiLinearLayer(128, 32, rng)
        cal = rng.standard_normal((400, 128))
        lsr_init(layer, cal)
        fresh = rng.standard_normal((400, 128))
        bin_std = layer.forward(Tensor(fresh)).data.std()
        float_std = (fresh @ layer.latent_w.data).std()
        assert 0.9 < bin_std / float_std < 1.1

    def test_degenerate_binarized_output_rejected(self):
        layer = BiLinearLayer(4, 2, np.random.default_rng(10))
        layer.latent_w.data = np.abs(layer.latent_w.data) + 0.1
        with pytest.raises(InitializationError):
            lsr_init(layer, np.ones((5, 4)))  # all signs +1 -> constant output

    def test_bnn_baseline_ignores_calibration(self):
        rng = np.random.default_rng(11)
        layer = BiLinearLayer(16, 8, rng, learnable_alpha=False)
        lsr_init(layer, rng.standard_normal((50, 16)))
        assert float(layer.alpha.data) == 1.0
        assert layer.alpha not in layer.parameters()

    def test_bnn_equals_bilinear_divided_by_alpha(self):
        rng = np.random.default_rng(12)
        lsr = BiLinearLayer(16, 8, rng)
        bnn = BiLinearLayer(16, 8, np.random.default_rng(12), learnable_alpha=False)
        np.testing.assert_array_equal(lsr.latent_w.data, bnn.latent_w.data)
        x = rng.standard_normal((10, 16))
        lsr_init(lsr, x)
        np.testing.assert_allclose(
            bnn.forward(Tensor(x)).data,
            lsr.forward(Tensor(x)).data / float(lsr.alpha.data),
        )
