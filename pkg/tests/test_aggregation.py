"""Offset-solver tests (closed form vs Monte Carlo) and pooling semantics."""

import numpy as np
import pytest

from binpoint.aggregation import (
    EMAConfig,
    ema_forward,
    ema_segment_forward,
    solve_delta_max_cf,
    solve_delta_max_mc,
)
from binpoint.autodiff import Tensor, backward, pool_points, sum_all


class TestClosedForm:
    def test_n_one_is_zero(self):
        assert solve_delta_max_cf(1) == 0.0

    def test_n_two_reference_value(self):
        # Phi(delta)^2 = 0.5  =>  delta = Phi^-1(sqrt(0.5)) ~ 0.5449
        assert abs(solve_delta_max_cf(2) - 0.5449) < 1e-3

    def test_strictly_increasing_in_n(self):
        values = [solve_delta_max_cf(n) for n in range(1, 200)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            solve_delta_max_cf(0)


class TestMonteCarlo:
    def test_n_one_median_of_normal(self):
        assert abs(solve_delta_max_mc(1, 100_000, seed=1)) < 0.02

    def test_n_two(self):
        assert abs(solve_delta_max_mc(2, 100_000, seed=2) - 0.5449) < 0.02

    def test_n_1024(self):
        assert abs(solve_delta_max_mc(1024, 100_000, seed=3) - 3.205) < 0.03

    def test_deterministic_per_seed(self):
        a = solve_delta_max_mc(16, 10_000, seed=42)
        b = solve_delta_max_mc(16, 10_000, seed=42)
        assert a == b
        assert a != solve_delta_max_mc(16, 10_000, seed=43)

    def test_agrees_with_closed_form(self):
        for n in (1, 4, 16, 64, 256, 1024, 4096):
            gap = abs(solve_delta_max_mc(n, 100_000, seed=n) - solve_delta_max_cf(n))
            assert gap < 0.05, f"n={n}: gap {gap}"

    def test_sample_budget_floor(self):
        with pytest.raises(ValueError):
            solve_delta_max_mc(4, 999)


class TestEMAConfig:
    def test_plain_kinds_pin_delta_to_zero(self):
        for kind in ("max", "avg", "ema-avg"):
            cfg = EMAConfig.resolve(kind, 1024)
            assert cfg.delta == 0.0
        with pytest.raises(ValueError):
            EMAConfig(kind="avg", n=8, delta=0.5)

    def test_ema_avg_offset_independent_of_n(self):
        assert all(EMAConfig.resolve("ema-avg", n).delta == 0.0 for n in (1, 10, 10_000))

    def test_ema_max_resolves_closed_form_by_default(self):
        cfg = EMAConfig.resolve("ema-max", 1024)
        assert cfg.delta == solve_delta_max_cf(1024)

    def test_mc_solver_option(self):
        cfg = EMAConfig.resolve("ema-max", 16, solver="mc", mc_samples=20_000, seed=5)
        assert abs(cfg.delta - solve_delta_max_cf(16)) < 0.05

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            EMAConfig(kind="median", n=4)


class TestEmaForward:
    def test_ema_avg_equals_plain_avg(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((64, 5))
        out_ema = ema_forward(Tensor(x), EMAConfig.resolve("ema-avg", 64))
        out_plain = pool_points(Tensor(x), "avg")
        np.testing.assert_array_equal(out_ema.data, out_plain.data)

    def test_ema_max_is_shifted_plain_max(self):
        rng = np.random.default_rng(1)
        cfg = EMAConfig.resolve("ema-max", 128)
        for _ in range(20):
            x = rng.standard_normal((128, 3))
            out = ema_forward(Tensor(x), cfg)
            np.testing.assert_allclose(out.data[0], x.max(axis=0) - cfg.delta, atol=1e-12)

    def test_balanced_sign_after_offset(self):
        # Monte Carlo on the balance property: ~half the pooled signs positive
        rng = np.random.default_rng(2)
        cfg = EMAConfig.resolve("ema-max", 1024)
        pos = 0
        trials = 3000
        maxima = rng.standard_normal((trials, 1024)).max(axis=1)
        pos = (maxima - cfg.delta >= 0).mean()
        assert abs(pos - 0.5) < 0.03

    def test_gradient_flows_through_shift(self):
        x = Tensor(np.array([[0.0], [2.0], [1.0]]), requires_grad=True)
        cfg = EMAConfig.resolve("ema-max", 3)
        backward(sum_all(ema_forward(x, cfg)))
        np.testing.assert_array_equal(x.grad, [[0.0], [1.0], [0.0]])

    def test_segment_variant_warns_on_point_count_mismatch(self, caplog):
        x = Tensor(np.random.default_rng(3).standard_normal((8, 2)))
        cfg = EMAConfig.resolve("ema-max", 16)
        with caplog.at_level("WARNING"):
            ema_segment_forward(x, cfg, 4)
        assert any("n=16" in rec.getMessage() for rec in caplog.records)

    def test_empty_input_rejected(self):
        from binpoint.autodiff import DimensionError
        with pytest.raises(DimensionError):
            ema_forward(Tensor(np.zeros((0, 4))), EMAConfig.resolve("ema-max", 4))
