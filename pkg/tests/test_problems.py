import math

import numpy as np
import pytest
from scipy.stats import norm as scipy_norm

from bsdelearn import (
    BasketParams,
    TimeGrid,
    basket_call_closed_form,
    basket_option,
    bounded_cosine,
    hjb_control,
    hjb_reference,
    make_problem,
    norm_cdf,
    simulate_paths,
)

ALL_PROBLEMS = [
    lambda: bounded_cosine(3, 1.0),
    lambda: basket_option(d=4, horizon=0.5, params=BasketParams(d=4)),
    lambda: hjb_control(d=3, horizon=0.5),
]


class TestNormCdf:
    def test_half_at_zero(self):
        assert norm_cdf(0.0) == 0.5

    def test_symmetry(self):
        x = np.random.default_rng(0).normal(size=50) * 3
        np.testing.assert_allclose(norm_cdf(-x), 1.0 - norm_cdf(x), atol=1e-15)

    def test_reference_value(self):
        assert abs(norm_cdf(1.0) - 0.841344746069) < 1e-12


def _random_states(problem, rng_, n=20):
    spread = 0.4 * (np.abs(problem.x0) + 1.0)
    return problem.x0 + rng_.normal(size=(n, problem.d)) * spread


class TestRegisteredGradients:
    """Every registered derivative matches central finite differences."""

    @pytest.mark.parametrize("factory", ALL_PROBLEMS)
    def test_terminal_gradient(self, factory):
        problem = factory()
        rng_ = np.random.default_rng(1)
        x = _random_states(problem, rng_)
        if problem.name == "basket_option":
            # keep clear of the payoff kink, where the derivative jumps
            basket = np.exp(x @ np.full(problem.d, 1.0 / problem.d))
            x = x[np.abs(basket - 100.0) > 1.0]
        got = problem.terminal_grad(x)
        h = 1e-6
        for j in range(problem.d):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            fd = (problem.terminal(xp) - problem.terminal(xm)) / (2 * h)
            scale = max(np.max(np.abs(fd)), 1.0)
            assert np.max(np.abs(got[:, j] - fd)) / scale < 1e-6

    @pytest.mark.parametrize("factory", ALL_PROBLEMS)
    def test_driver_partials(self, factory):
        problem = factory()
        rng_ = np.random.default_rng(2)
        n = 20
        x = _random_states(problem, rng_, n)
        t = np.full((n, 1), 0.3)
        y = rng_.normal(size=(n, 1))
        z = rng_.normal(size=(n, problem.d))
        h = 1e-6

        f0 = np.asarray(problem.driver(t, x, y, z))
        gx = np.asarray(problem.driver_grad_x(t, x, y, z))
        gy = np.asarray(problem.driver_grad_y(t, x, y, z))
        gz = np.asarray(problem.driver_grad_z(t, x, y, z))
        assert f0.shape == (n, 1) and gy.shape == (n, 1)
        assert gx.shape == (n, problem.d) and gz.shape == (n, problem.d)

        def check(got, fd):
            scale = max(np.max(np.abs(fd)), 1.0)
            assert np.max(np.abs(got - fd)) / scale < 1e-6

        for j in range(problem.d):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            check(gx[:, j:j + 1],
                  (np.asarray(problem.driver(t, xp, y, z))
                   - np.asarray(problem.driver(t, xm, y, z))) / (2 * h))
            zp, zm = z.copy(), z.copy()
            zp[:, j] += h
            zm[:, j] -= h
            check(gz[:, j:j + 1],
                  (np.asarray(problem.driver(t, x, y, zp))
                   - np.asarray(problem.driver(t, x, y, zm))) / (2 * h))
        check(gy, (np.asarray(problem.driver(t, x, y + h, z))
                   - np.asarray(problem.driver(t, x, y - h, z))) / (2 * h))

    @pytest.mark.parametrize("factory", ALL_PROBLEMS)
    def test_moments_match_simulation(self, factory):
        problem = factory()
        grid = TimeGrid(problem.horizon, 2)
        n_paths = 100_000
        batch = simulate_paths(problem, grid, n_paths, seed=11)
        mean_fn, std_fn = problem.moments
        for n in (1, 2):
            t = grid.times()[n]
            xt = batch.states[:, n, :]
            se_mean = std_fn(t) / math.sqrt(n_paths)
            assert np.all(np.abs(xt.mean(axis=0) - mean_fn(t)) < 4 * se_mean)
            var = std_fn(t) ** 2
            se_var = var * math.sqrt(2.0 / (n_paths - 1))
            assert np.all(np.abs(xt.var(axis=0) - var) < 4 * se_var)


class TestBoundedCosine:
    def test_terminal_condition_is_solution_at_maturity(self):
        problem = bounded_cosine(4, 2.0)
        x = np.random.default_rng(3).normal(size=(10, 4))
        np.testing.assert_allclose(problem.exact.y(2.0, x), problem.terminal(x),
                                   rtol=1e-14)

    def test_value_at_origin(self):
        problem = bounded_cosine(1, 2.0)
        y = problem.exact.y(0.0, np.zeros((1, 1)))
        np.testing.assert_allclose(y, [math.e])

    def test_gamma_matches_derivative_of_z(self):
        problem = bounded_cosine(3, 1.5)
        rng_ = np.random.default_rng(4)
        x = rng_.normal(size=(6, 3))
        t = 0.4
        gamma = problem.exact.gamma(t, x)
        h = 1e-6
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            fd = (problem.exact.z(t, xp) - problem.exact.z(t, xm)) / (2 * h)
            np.testing.assert_allclose(gamma[:, j, :], fd, atol=1e-7)

    def test_z_is_gradient_of_y_times_diffusion(self):
        problem = bounded_cosine(2, 1.0)
        x = np.random.default_rng(5).normal(size=(5, 2))
        t = 0.7
        h = 1e-6
        b = problem.diffusion(t, x)
        grad = np.empty((5, 2))
        for j in range(2):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            grad[:, j] = (problem.exact.y(t, xp) - problem.exact.y(t, xm)) / (2 * h)
        np.testing.assert_allclose(problem.exact.z(t, x), grad @ b, atol=1e-8)


def independent_basket_formula(params, tau, ln_state):
    """Second, deliberately different coding of the basket call formula.

    Works asset-by-asset with scipy's normal CDF; used as the agreement
    oracle for the packaged implementation.
    """
    c = params.weights
    total = float(np.sum(c * ln_state))
    basket = math.exp(total)
    b_bar_sq = float(np.sum((params.vols * c) ** 2))
    b_bar = math.sqrt(b_bar_sq)
    delta_bar = float(np.sum(c * (params.dividends + 0.5 * params.vols**2))) - 0.5 * b_bar_sq
    d1 = (math.log(basket / params.strike)
          + (params.rate - delta_bar + 0.5 * b_bar_sq) * tau) / (b_bar * math.sqrt(tau))
    d2 = d1 - b_bar * math.sqrt(tau)
    price = (basket * math.exp(-delta_bar * tau) * scipy_norm.cdf(d1)
             - params.strike * math.exp(-params.rate * tau) * scipy_norm.cdf(d2))
    delta_rows = c * params.vols * basket * math.exp(-delta_bar * tau) * scipy_norm.cdf(d1)
    return price, delta_rows


class TestBasketClosedForm:
    def test_single_asset_reduces_to_textbook_call(self):
        params = BasketParams(d=1, spot=100.0, strike=95.0, rate=0.03,
                              returns=[0.05], vols=[0.2], dividends=[0.0],
                              weights=[1.0])
        tau = 0.5
        spot = 110.0
        ln_state = np.array([[math.log(spot)]])
        y, z, _, _ = basket_call_closed_form(params, tau, 0.0, ln_state)
        d1 = (math.log(spot / 95.0) + (0.03 + 0.5 * 0.04) * tau) / (0.2 * math.sqrt(tau))
        d2 = d1 - 0.2 * math.sqrt(tau)
        textbook = spot * scipy_norm.cdf(d1) - 95.0 * math.exp(-0.03 * tau) * scipy_norm.cdf(d2)
        assert abs(y[0] - textbook) < 1e-10

    def test_two_codings_agree_at_d50(self):
        params = BasketParams(d=50)
        rng_ = np.random.default_rng(6)
        ln_state = math.log(100.0) + rng_.normal(size=(8, 50)) * 0.1
        y, z, _, _ = basket_call_closed_form(params, 0.5, 0.0, ln_state)
        for i in range(8):
            ref_y, ref_z = independent_basket_formula(params, 0.5, ln_state[i])
            assert abs(y[i] - ref_y) <= 1e-12 * max(1.0, abs(ref_y))
            assert np.max(np.abs(z[i] - ref_z)) <= 1e-12 * max(1.0, np.max(np.abs(ref_z)))

    def test_deep_in_the_money_limit(self):
        params = BasketParams(d=3)
        tau = 0.01
        ln_state = np.full((1, 3), math.log(1000.0))  # basket level 1000 vs K=100
        y, _, _, _ = basket_call_closed_form(params, tau, 0.0, ln_state)
        limit = 1000.0 * math.exp(-params.dividend_bar * tau) \
            - 100.0 * math.exp(-params.rate * tau)
        np.testing.assert_allclose(y, [limit], rtol=1e-12)

    def test_exact_z_and_gamma_consistent_with_value(self):
        problem = basket_option(d=3, horizon=0.5)
        rng_ = np.random.default_rng(7)
        x = problem.x0 + rng_.normal(size=(5, 3)) * 0.1
        t = 0.2
        h = 1e-6
        b = np.diag(BasketParams(d=3).vols)
        grad = np.empty((5, 3))
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            grad[:, j] = (problem.exact.y(t, xp) - problem.exact.y(t, xm)) / (2 * h)
        np.testing.assert_allclose(problem.exact.z(t, x), grad @ b, rtol=1e-6)
        gamma = problem.exact.gamma(t, x)
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            fd = (problem.exact.z(t, xp) - problem.exact.z(t, xm)) / (2 * h)
            np.testing.assert_allclose(gamma[:, j, :], fd, rtol=1e-5, atol=1e-9)

    def test_terminal_kink_left_limit(self):
        # strike chosen as the exact float the payoff computes at this state,
        # so basket == K holds bitwise and the left limit (zero) applies
        at_strike = np.full((1, 2), math.log(100.0))
        weights = np.full(2, 0.5)
        exact_level = float(np.exp(at_strike @ weights)[0])
        problem = basket_option(d=2, horizon=0.5,
                                params=BasketParams(d=2, strike=exact_level))
        np.testing.assert_array_equal(problem.terminal_grad(at_strike), np.zeros((1, 2)))
        assert problem.terminal(at_strike)[0] == 0.0
        above = at_strike + 1e-6
        assert np.all(problem.terminal_grad(above) > 0.0)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            BasketParams(d=2, weights=[0.7, 0.7])
        with pytest.raises(ValueError):
            BasketParams(d=2, weights=[-0.5, 1.5])

    def test_reporting_maps_hessian_to_price_coordinates(self):
        problem = basket_option(d=2, horizon=0.5)
        x = np.array([[math.log(90.0), math.log(120.0)]])
        gamma_ln = problem.exact.gamma(0.1, x)
        mapped = problem.reporting.map_gamma(0.1, x, gamma_ln)
        np.testing.assert_allclose(mapped, problem.reporting.exact.gamma(0.1, x),
                                   rtol=1e-12)


class TestHjb:
    def test_driver_zero_at_zero_control(self):
        problem = hjb_control(d=3)
        f = problem.driver(np.zeros((2, 1)), np.ones((2, 3)), np.ones((2, 1)),
                           np.zeros((2, 3)))
        np.testing.assert_array_equal(np.asarray(f), np.zeros((2, 1)))

    def test_driver_grad_z_polynomial(self):
        problem = hjb_control(d=2)
        z = np.array([[0.5, -1.0]])
        got = problem.driver_grad_z(None, np.ones((1, 2)), None, z)
        np.testing.assert_allclose(got, -2.0 * z / 0.2)

    def test_reference_linear_terminal_closed_form(self):
        # g(x) = c . x: Y0 = c . x0 - |c|^2 b^2 T / 2 by the Gaussian mgf
        d = 4
        c = np.array([0.3, -0.2, 0.5, 0.1])
        x0 = np.ones(d)
        b, horizon = math.sqrt(0.2), 0.5
        ref = hjb_reference(
            x0, b, horizon,
            terminal=lambda x: x @ c,
            terminal_grad=lambda x: np.broadcast_to(c, x.shape),
            n_samples=200_000, n_runs=1, seed=21, compute_gamma=False)
        closed = float(c @ x0) - float(c @ c) * b * b * horizon / 2.0
        assert abs(ref["y0"] - closed) < 3 * ref["y0_se"]
        np.testing.assert_allclose(ref["z0"], b * c, atol=5e-3)

    def test_reference_constant_terminal(self):
        d = 2
        ref = hjb_reference(
            np.zeros(d), 1.0, 1.0,
            terminal=lambda x: np.full(x.shape[0], 1.7),
            terminal_grad=lambda x: np.zeros_like(x),
            n_samples=10_000, n_runs=1, seed=2, compute_gamma=True)
        assert abs(ref["y0"] - 1.7) < 1e-12
        np.testing.assert_allclose(ref["z0"], np.zeros(d), atol=1e-12)
        np.testing.assert_allclose(ref["gamma0"], np.zeros((d, d)), atol=1e-9)

    def test_reference_seed_stability(self):
        problem = hjb_control(d=5, horizon=0.5)
        a = problem.t0_reference_factory(n_samples=100_000, n_runs=1, seed=1,
                                         compute_gamma=False)
        b = problem.t0_reference_factory(n_samples=100_000, n_runs=1, seed=2,
                                         compute_gamma=False)
        combined = math.hypot(a["y0_se"], b["y0_se"])
        assert abs(a["y0"] - b["y0"]) < 3 * combined


def test_registry_round_trip():
    problem = make_problem("bounded_cosine", 2, 1.0)
    assert problem.name == "bounded_cosine" and problem.d == 2
    with pytest.raises(KeyError):
        make_problem("unknown", 1, 1.0)
