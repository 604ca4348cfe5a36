from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from mobgam.basis import (
    BasisKind,
    BasisSpec,
    build_cyclic,
    build_factor_smooth,
    build_random_effect,
    build_thin_plate,
    null_space_dimension,
    tps_radial,
)
from mobgam.errors import (
    ConfigError,
    DegenerateCovariateError,
    DimensionError,
    UnknownLevelError,
)
from mobgam.gam.fitting import fit_penalized_ls, optimize_reml


def assert_psd(S):
    assert np.allclose(S, S.T, atol=1e-12, rtol=0)
    ev = np.linalg.eigvalsh(S)
    assert ev.min() >= -1e-10 * max(ev.max(), 0.0)


class TestBasisSpec:
    def test_cyclic_needs_positive_period(self):
        with pytest.raises(ConfigError):
            BasisSpec(BasisKind.CYCLIC, 6, period=0.0)

    def test_small_dimension_rejected(self):
        with pytest.raises(DimensionError):
            BasisSpec(BasisKind.THIN_PLATE, 2)


class TestThinPlate:
    def test_null_space_coefficients_have_zero_penalty(self):
        x = np.linspace(0, 1, 10)
        block = build_thin_plate(x, k=5)
        S = block.penalties[0]
        for beta in (np.eye(5)[3], np.eye(5)[4], np.array([0, 0, 0, 2.0, -1.5])):
            assert beta @ S @ beta == 0.0

    def test_constant_and_linear_columns(self):
        x = np.linspace(-3, 5, 25)
        block = build_thin_plate(x, k=7)
        X = block.columns
        assert np.allclose(X[:, 5], 1.0)
        assert np.allclose(X[:, 6], (x - x.mean()) / (x.max() - x.min()))

    @pytest.mark.parametrize("k", [3, 5, 10])
    def test_penalty_psd_with_two_dim_null_space(self, k):
        x = np.linspace(0, 1, 30) ** 2
        block = build_thin_plate(x, k)
        assert_psd(block.penalties[0])
        assert block.null_space_dim == [2]
        assert block.columns.shape == (30, k)
        assert np.linalg.matrix_rank(block.columns) == k

    def test_full_rank_span_matches_dense_tps_system(self):
        # k = n: columns must span {E d : T'd = 0} + span(T) computed on raw x
        x = np.linspace(0, 1, 10)
        block = build_thin_plate(x, k=10)
        E = tps_radial(x[:, None] - x[None, :])
        T = np.column_stack([np.ones_like(x), x])
        ref = np.column_stack([E @ linalg.null_space(T.T), T])
        angles = linalg.subspace_angles(block.columns, ref)
        assert np.max(angles) < 1e-8

    def test_full_rank_fit_matches_wahba_system(self):
        rng = np.random.default_rng(3)
        x = np.linspace(0, 1, 10)
        y = np.sin(5 * x) + rng.normal(0, 0.1, x.size)
        block = build_thin_plate(x, k=10)
        lam = 0.37
        beta, _ = fit_penalized_ls(block.columns, block.penalties, y, [lam])
        xs = block.basis.scaled(x)
        E = tps_radial(xs[:, None] - xs[None, :])
        T = np.column_stack([np.ones_like(xs), xs])
        n = x.size
        M = np.block([[E + lam * np.eye(n), T], [T.T, np.zeros((2, 2))]])
        sol = np.linalg.solve(M, np.concatenate([y, np.zeros(2)]))
        f_ref = E @ sol[:n] + T @ sol[n:]
        np.testing.assert_allclose(block.columns @ beta, f_ref, rtol=0, atol=1e-9)

    def test_reml_fit_recovers_sine(self):
        rng = np.random.default_rng(2024)
        x = rng.uniform(0, 1, 50)
        f = np.sin(2 * np.pi * x)
        y = f + rng.normal(0, 0.05, 50)
        block = build_thin_plate(x, k=8)
        fit = optimize_reml(block.columns, block.penalties, y)
        assert np.sqrt(np.mean((fit.fitted_values - f) ** 2)) < 0.1

    def test_errors(self):
        with pytest.raises(DimensionError):
            build_thin_plate(np.arange(4.0), k=5)
        with pytest.raises(DimensionError):
            build_thin_plate(np.arange(10.0), k=2)
        with pytest.raises(DegenerateCovariateError):
            build_thin_plate(np.repeat([0.0, 1.0, 2.0], 4), k=4)

    def test_new_data_uses_training_parameters(self):
        x = np.linspace(0, 70, 71)
        block = build_thin_plate(x, k=10)
        np.testing.assert_array_equal(block.basis.design(x[::-1]), block.columns[::-1])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=8, max_size=40, unique=True),
           st.integers(3, 8))
    def test_penalty_psd_property(self, xs, k):
        x = np.array(xs)
        if np.ptp(x) < 1e-3:
            return
        block = build_thin_plate(x, k)
        assert_psd(block.penalties[0])
        S = block.penalties[0]
        assert np.abs(S[:, -2:]).max() == 0.0


class TestCyclic:
    def test_periodic_values(self):
        block = build_cyclic(np.arange(7.0), k=6, period=7.0)
        X = block.basis.design(np.array([0.0, 7.0]))
        np.testing.assert_allclose(X[0], X[1], rtol=0, atol=1e-12)

    def test_derivatives_match_across_wrap(self):
        b = build_cyclic(np.arange(7.0), k=6, period=7.0).basis
        h = 1e-4
        lo = b.design(np.array([7 - 2 * h, 7 - h, 7.0]))
        hi = b.design(np.array([0.0, h, 2 * h]))
        # one-sided differences from each side agree to O(h)
        d1_lo = (lo[2] - lo[1]) / h
        d1_hi = (hi[1] - hi[0]) / h
        np.testing.assert_allclose(d1_lo, d1_hi, atol=1e-3)
        d2_lo = (lo[2] - 2 * lo[1] + lo[0]) / h ** 2
        d2_hi = (hi[2] - 2 * hi[1] + hi[0]) / h ** 2
        np.testing.assert_allclose(d2_lo, d2_hi, atol=1e-2)

    def test_constant_is_in_null_space(self):
        block = build_cyclic(np.linspace(0, 7, 40), k=6, period=7.0)
        one = np.ones(6)
        np.testing.assert_allclose(block.columns @ one, 1.0, atol=1e-12)
        assert abs(one @ block.penalties[0] @ one) < 1e-12
        assert block.null_space_dim == [1]
        assert_psd(block.penalties[0])

    def test_recovers_cosine(self):
        rng = np.random.default_rng(7)
        x = np.tile(np.arange(7.0), 10)
        f = np.cos(2 * np.pi * x / 7)
        y = f + rng.normal(0, 0.01, x.size)
        block = build_cyclic(x, k=6, period=7.0)
        fit = optimize_reml(block.columns, block.penalties, y)
        grid = np.linspace(0, 7, 141)
        err = block.basis.design(grid) @ fit.coefficients - np.cos(2 * np.pi * grid / 7)
        assert np.max(np.abs(fit.fitted_values - f)) < 0.05
        assert np.max(np.abs(err)) < 0.05

    def test_bad_period(self):
        with pytest.raises(ConfigError):
            build_cyclic(np.arange(7.0), k=6, period=-1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 12), st.floats(0.5, 50.0), st.floats(-10, 10))
    def test_periodicity_property(self, k, period, shift):
        b = build_cyclic(np.linspace(0, period, 20), k, period).basis
        X = b.design(np.array([shift, shift + period, shift - 3 * period]))
        np.testing.assert_allclose(X[0], X[1], atol=1e-9)
        np.testing.assert_allclose(X[0], X[2], atol=1e-9)
        assert_psd(build_cyclic(np.linspace(0, period, 20), k, period).penalties[0])


class TestRandomEffect:
    def test_one_hot(self):
        block = build_random_effect(["A", "B", "A"], ["A", "B", "C"])
        np.testing.assert_array_equal(block.columns, np.eye(3)[[0, 1, 0]])
        np.testing.assert_array_equal(block.penalties[0], np.eye(3))
        assert block.null_space_dim == [0]

    def test_unknown_level(self):
        with pytest.raises(UnknownLevelError):
            build_random_effect(["A", "D"], ["A", "B"])

    def test_ridge_limit(self):
        rng = np.random.default_rng(1)
        g = np.repeat(list("ABCD"), 5)
        block = build_random_effect(g)
        y = rng.normal(size=g.size) + 3.0
        beta, _ = fit_penalized_ls(block.columns, block.penalties, y, [1e12])
        assert np.linalg.norm(beta) < 1e-6 * np.linalg.norm(y)

    def test_reml_recovers_level_effects(self):
        rng = np.random.default_rng(11)
        levels = [f"L{i}" for i in range(6)]
        truth = rng.normal(0, 0.5, 6)
        g = np.repeat(levels, 20)
        y = np.repeat(truth, 20) + rng.normal(0, 0.1, g.size)
        block = build_random_effect(g, levels)
        fit = optimize_reml(block.columns, block.penalties, y)
        assert np.corrcoef(fit.coefficients, truth)[0, 1] > 0.95


class TestFactorSmooth:
    def test_null_direction_penalized_by_ridge_only(self):
        x = np.tile(np.linspace(0, 1, 12), 3)
        g = np.repeat(["a", "b", "c"], 12)
        block = build_factor_smooth(x, g, k=5)
        S_w, S_n = block.penalties
        beta = np.zeros(15)
        beta[5 + 4] = 1.0  # linear coefficient of level "b"
        assert beta @ S_w @ beta == 0.0
        assert beta @ S_n @ beta > 0.0

    def test_dimensions_and_positive_definiteness(self):
        x = np.tile(np.linspace(0, 1, 12), 4)
        g = np.repeat(list("wxyz"), 12)
        block = build_factor_smooth(x, g, k=6)
        assert block.columns.shape == (48, 24)
        for S in block.penalties:
            assert_psd(S)
        combined = 0.3 * block.penalties[0] + 2.0 * block.penalties[1]
        assert np.linalg.eigvalsh(combined).min() > 0

    def test_identical_levels_give_identical_curves(self):
        rng = np.random.default_rng(5)
        x1 = np.linspace(0, 1, 30)
        y1 = np.sin(3 * x1) + rng.normal(0, 0.1, 30)
        x = np.concatenate([x1, x1])
        y = np.concatenate([y1, y1])
        g = np.repeat(["p", "q"], 30)
        block = build_factor_smooth(x, g, k=8)
        fit = optimize_reml(block.columns, block.penalties, y)
        np.testing.assert_allclose(fit.fitted_values[:30], fit.fitted_values[30:], atol=1e-8)

    def test_recovers_level_curves(self):
        rng = np.random.default_rng(99)
        t = np.linspace(0, 1, 70)
        levels = list("abcde")
        x = np.tile(t, 5)
        g = np.repeat(levels, 70)
        phase = rng.uniform(0, 2 * np.pi, 5)
        truth = np.concatenate([0.8 * t + 0.5 * np.sin(2 * np.pi * t + p) for p in phase])
        y = truth + rng.normal(0, 0.1, truth.size)
        block = build_factor_smooth(x, g, k=10)
        fit = optimize_reml(block.columns, block.penalties, y)
        for i in range(5):
            sl = slice(70 * i, 70 * (i + 1))
            assert np.sqrt(np.mean((fit.fitted_values[sl] - truth[sl]) ** 2)) < 0.15

    def test_degenerate_level(self):
        x = np.concatenate([np.linspace(0, 1, 10), np.repeat([0.0, 1.0], 5)])
        g = np.repeat(["ok", "bad"], 10)
        with pytest.raises(DegenerateCovariateError, match="bad"):
            build_factor_smooth(x, g, k=5)


def test_null_space_dimension_relative_tolerance():
    # cutoff is 1e-10 * 1e6 = 1e-4
    assert null_space_dimension(np.diag([1e6, 1.0, 1e-5, 0.0])) == 2
    assert null_space_dimension(np.diag([1e6, 1.0, 1e-3, 0.0])) == 1
