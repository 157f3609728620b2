import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import lsq_linear

from robust_sim.core import PiecewiseLinearActivation
from robust_sim.monotone_fit import (ChainQP, brute_fit_oracle, fit_activation,
                                     fit_activation_full, fitted_values, solve_chain_qp)


def random_problem(rng, n, a=None, b=None):
    z = np.sort(rng.normal(size=n) * 2)
    k = int(rng.integers(0, n))
    z -= z[k]
    a = rng.uniform(0.01, 1.0) if a is None else a
    b = rng.uniform(1.0, 10.0) if b is None else b
    dz = np.diff(z)
    lo = np.where(z[:-1] >= 0, a * dz, 0.0)
    return ChainQP(rng.uniform(-5, 5, size=n), lo, b * dz, k, rng.integers(1, 4, size=n).astype(float))


def lsq_oracle(p: ChainQP):
    """scipy bounded least squares over the consecutive differences."""
    n, k = p.n, p.anchor
    A = np.zeros((n, n - 1))
    for i in range(k + 1, n):
        A[i, k:i] = 1.0
    for i in range(k):
        A[i, i:k] = -1.0
    sw = np.sqrt(p.weights)
    lo, hi = p.lowers, p.uppers
    free = hi - lo > 0
    d = lo.copy()
    if free.any():
        rhs = sw * p.targets - (sw[:, None] * A[:, ~free]) @ lo[~free]
        res = lsq_linear(sw[:, None] * A[:, free], rhs, bounds=(lo[free], hi[free]),
                         method="bvls", tol=1e-14)
        d[free] = res.x
    return A @ d


class TestExamples:
    def test_feasible_data_fit_exactly(self):
        fit = fit_activation_full([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], 0.5, 2.0)
        assert fit.objective == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(fit.activation([-1.0, 0.5, 1.0]), [-1.0, 0.5, 1.0])

    def test_two_variable_kkt(self):
        fit = fit_activation_full([0.0, 1.0, 2.0], [0.0, 2.0, 1.0], 0.1, 10.0)
        np.testing.assert_allclose(fit.activation.values, [0.0, 1.45, 1.55], atol=1e-12)
        assert fit.objective == pytest.approx(0.605)

    def test_all_zero_projections(self, rng):
        u = fit_activation(np.zeros(7), rng.normal(size=7), 0.5, 1.0)
        assert u.n == 1
        assert u(0.0) == 0.0

    def test_anchor_only_problem(self):
        res = solve_chain_qp(ChainQP(np.array([3.0]), np.empty(0), np.empty(0), 0))
        np.testing.assert_array_equal(res.values, [0.0])
        assert res.objective == 9.0

    def test_chain_example(self):
        p = ChainQP(np.array([0.0, 2.0, 1.0]), np.array([0.1, 0.1]), np.array([10.0, 10.0]), 0)
        res = solve_chain_qp(p)
        np.testing.assert_allclose(res.values, [0.0, 1.45, 1.55], atol=1e-12)
        np.testing.assert_allclose(brute_fit_oracle(p).values, res.values, atol=1e-6)

    def test_upper_band_active(self):
        p = ChainQP(np.array([0.0, 5.0]), np.array([0.0]), np.array([1.0]), 0)
        res = solve_chain_qp(p)
        np.testing.assert_allclose(res.values, [0.0, 1.0])
        assert res.objective == pytest.approx(16.0)
        np.testing.assert_allclose(brute_fit_oracle(p).values, [0.0, 1.0], atol=1e-6)

    def test_interior_optimum_is_targets_with_anchor(self, rng):
        y = rng.uniform(-1, 1, size=6)
        p = ChainQP(y, np.full(5, -100.0), np.full(5, 100.0), 2)
        expected = y.copy()
        expected[2] = 0.0
        for method in ("enumerate", "pgd"):
            np.testing.assert_allclose(brute_fit_oracle(p, method=method).values, expected, atol=1e-6)
        np.testing.assert_allclose(solve_chain_qp(p).values, expected, atol=1e-12)


class TestValidation:
    def test_infeasible(self):
        with pytest.raises(ValueError):
            ChainQP(np.zeros(2), np.array([1.0]), np.array([0.5]), 0)

    def test_bad_anchor(self):
        with pytest.raises(ValueError):
            ChainQP(np.zeros(2), np.zeros(1), np.ones(1), 2)

    def test_oracle_size_limit(self, rng):
        with pytest.raises(ValueError):
            brute_fit_oracle(random_problem(rng, 11))

    @pytest.mark.parametrize("z,y,tol", [([0.0, np.nan], [1.0, 1.0], 1e-9),
                                         ([0.0, 1.0], [1.0, np.inf], 1e-9),
                                         ([0.0, 1.0], [1.0, 1.0], 0.0),
                                         ([0.0, 1.0], [1.0], 1e-9),
                                         ([], [], 1e-9)])
    def test_fit_errors(self, z, y, tol):
        with pytest.raises(ValueError):
            fit_activation(z, y, 0.5, 1.0, tol)


class TestOracleAgreement:
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_matches_enumeration(self, seed, n):
        rng = np.random.default_rng(seed)
        p = random_problem(rng, n)
        dp = solve_chain_qp(p)
        ref = brute_fit_oracle(p, method="enumerate")
        np.testing.assert_allclose(dp.values, ref.values, atol=1e-7)
        assert dp.objective == pytest.approx(ref.objective, abs=1e-7)

    @pytest.mark.parametrize("n", [20, 100, 400])
    def test_matches_scipy_bounded_least_squares(self, rng, n):
        for _ in range(5):
            p = random_problem(rng, n)
            t = solve_chain_qp(p).values
            ref = lsq_oracle(p)
            assert p.objective(t) <= p.objective(ref) + 1e-8 * (1 + p.objective(ref))
            np.testing.assert_allclose(t, ref, atol=1e-5)

    def test_kkt_residual_small(self, rng):
        for _ in range(50):
            p = random_problem(rng, int(rng.integers(2, 60)))
            assert solve_chain_qp(p).kkt_residual < 1e-8


class TestFitProperties:
    def data(self, rng, m=200):
        z = rng.normal(size=m) * 2
        y = np.maximum(z, 0) + rng.normal(size=m)
        return z, y

    def test_membership(self, rng):
        for _ in range(50):
            z, y = self.data(rng, int(rng.integers(1, 300)))
            a, b = rng.uniform(0.01, 1), rng.uniform(1, 10)
            u = fit_activation(z, y, a, b)
            assert u.membership_violation() == 0.0
            s = u.slopes
            lower = np.where(u.knots[:-1] >= 0, a, 0.0)
            assert np.all(s >= lower) and np.all(s <= b)

    def test_permutation_invariant(self, rng):
        z, y = self.data(rng)
        p = rng.permutation(z.size)
        u1, u2 = fit_activation(z, y, 0.5, 2.0), fit_activation(z[p], y[p], 0.5, 2.0)
        grid = np.linspace(-6, 6, 101)
        np.testing.assert_allclose(u1(grid), u2(grid), atol=1e-12)

    def test_idempotent(self, rng):
        z, y = self.data(rng)
        fit = fit_activation_full(z, y, 0.5, 2.0)
        again = fit_activation_full(z, fit.fitted, 0.5, 2.0)
        assert again.objective < 1e-20
        np.testing.assert_allclose(again.fitted, fit.fitted, atol=1e-12)

    def test_beats_feasible_perturbations(self, rng):
        z, y = self.data(rng, 80)
        a, b = 0.5, 2.0
        fit = fit_activation_full(z, y, a, b)
        u = fit.activation
        lower = np.where(u.knots[:-1] >= 0, a, 0.0)
        for _ in range(10):
            s = np.clip(u.slopes + rng.normal(scale=0.3, size=u.slopes.size), lower, b)
            other = PiecewiseLinearActivation(u.knots, s, a, b)
            assert fit.objective <= float(np.sum((other(z) - y) ** 2)) + 1e-12

    def test_ties_pooled(self, rng):
        z = np.repeat(rng.normal(size=20), 3)
        y = rng.normal(size=60)
        fit = fit_activation_full(z, y, 0.5, 2.0)
        assert fit.activation.n == 21
        assert np.all(fit.fitted == fit.activation(z))

    def test_fitted_values_fast_path(self, rng):
        z, y = self.data(rng)
        np.testing.assert_array_equal(fitted_values(z, y, 0.5, 2.0),
                                      fit_activation_full(z, y, 0.5, 2.0).fitted)

    def test_problem_matches_pooled_data(self, rng):
        # no ties, so the pooled objective equals the per-sample one
        z, y = self.data(rng, 30)
        fit = fit_activation_full(z, y, 0.5, 2.0)
        p = fit.problem
        assert p.n == fit.activation.n
        assert p.objective(fit.activation.values) == pytest.approx(fit.objective, abs=1e-9)
        assert fit.kkt_residual < 1e-8

