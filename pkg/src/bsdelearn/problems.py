"""Benchmark BSDE problems: coefficients, derivatives, moments, references.

Each problem bundles the forward SDE coefficients (with the Jacobians the
Malliavin propagation needs), the driver and its partial derivatives, the
terminal condition, closed-form input moments, and whatever reference
solution is available (closed form, or a Monte-Carlo estimate at t_0).

Driver callables are polymorphic: they accept plain arrays or autodiff
nodes for (y, z), so one definition serves simulation-time oracles and
the training loss graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import BsdeLearnError

_vec_erfc = np.vectorize(math.erfc, otypes=[np.float64])

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(x):
    """Standard normal CDF via the complementary error function."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * _vec_erfc(-x / _SQRT2)
    return out if out.ndim else float(out)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form (Y, Z, Gamma) as functions of (t, states)."""

    y: callable
    z: callable
    gamma: callable


@dataclass(frozen=True)
class Reporting:
    """Reference solution and prediction maps in reporting coordinates.

    Problems solved in transformed coordinates (the basket option uses the
    log of the price processes) report metrics for the original processes:
    `exact` evaluates references there and map_* carries network outputs
    over. Identity maps elsewhere.
    """

    exact: ExactSolution
    map_y: callable = None
    map_z: callable = None
    map_gamma: callable = None


@dataclass(frozen=True)
class Problem:
    """Immutable description of one decoupled FBSDE."""

    name: str
    d: int
    horizon: float
    x0: np.ndarray
    drift: callable                    # (t, x rows) -> (B, d) or (d,)
    diffusion: callable                # (t, x rows) -> (d, d) or (B, d, d)
    drift_jacobian: callable           # (t, x rows) -> (d, d), (B, d, d) or None-valued fn
    diffusion_jacobian_term: callable  # (t, x, D, dW) -> (B, d, d) or None
    driver: callable                   # (t, x, y, z) -> (B, 1)
    driver_grad_x: callable            # -> (B, d)
    driver_grad_y: callable            # -> (B, 1)
    driver_grad_z: callable            # -> (B, d)
    terminal: callable                 # (x rows) -> (B,)
    terminal_grad: callable            # (x rows) -> (B, d)
    constant_diffusion: bool = True
    diffusion_inverse: callable = None  # (t, x rows) -> (d, d) or (B, d, d)
    moments: tuple = None               # (mean(t) -> (d,), std(t) -> (d,))
    exact: ExactSolution = None         # in solver coordinates
    reporting: Reporting = None
    t0_reference_factory: callable = None

    def diffusion_inverse_at(self, t, x):
        if self.diffusion_inverse is not None:
            return self.diffusion_inverse(t, x)
        b = np.asarray(self.diffusion(t, x), dtype=np.float64)
        try:
            return np.linalg.inv(b)
        except np.linalg.LinAlgError as err:
            from .errors import SingularDiffusionError

            raise SingularDiffusionError(f"diffusion singular at t={t}") from err


def _rows(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# bounded oscillatory BSDE (trigonometric solution)
# ---------------------------------------------------------------------------

def bounded_cosine(d, horizon):
    """Bounded BSDE whose solution is exp((T-t)/2) * cos(sum of states).

    Forward process: arithmetic Brownian motion with drift 0.2/d per
    component and diffusion (1/sqrt(d)) * I, started at the all-ones
    vector. The driver couples (y, z) quadratically, which is what makes
    plain forward schemes fragile on this problem.
    """
    a_scalar = 0.2 / d
    b_scalar = 1.0 / math.sqrt(d)
    x0 = np.ones(d)
    b_matrix = b_scalar * np.eye(d)
    b_inverse = (1.0 / b_scalar) * np.eye(d)
    big_t = float(horizon)

    def drift(t, x):
        return np.full((x.shape[0], d), a_scalar)

    def diffusion(t, x):
        return b_matrix

    def drift_jacobian(t, x):
        return None  # constant drift

    def diffusion_jacobian_term(t, x, dmat, dw):
        return None  # constant diffusion

    def _sc(t, x):
        s = np.sum(x, axis=1, keepdims=True)
        return np.sin(s), np.cos(s), np.exp((big_t - t) / 2.0)

    def driver(t, x, y, z):
        sin_s, cos_s, decay = _sc(t, _rows(x))
        base = (cos_s + 0.2 * sin_s) * decay - 0.5 * np.square(sin_s * cos_s * np.square(decay))
        coupling = ad.square(y * ad.row_sum(z)) * (1.0 / (2.0 * d))
        return base + coupling

    def driver_grad_x(t, x, y, z):
        sin_s, cos_s, decay = _sc(t, _rows(x))
        decay4 = np.square(np.square(decay))
        val = (-sin_s + 0.2 * cos_s) * decay \
            - decay4 * sin_s * cos_s * (np.square(cos_s) - np.square(sin_s))
        return np.broadcast_to(val, (val.shape[0], d))

    def driver_grad_y(t, x, y, z):
        s = ad.row_sum(z)
        return (y * s) * s * (1.0 / d)

    def driver_grad_z(t, x, y, z):
        q = (y * ad.row_sum(z)) * y * (1.0 / d)
        return q * np.ones((1, d))

    def terminal(x):
        return np.cos(np.sum(_rows(x), axis=1))

    def terminal_grad(x):
        x = _rows(x)
        return np.broadcast_to(-np.sin(np.sum(x, axis=1, keepdims=True)), x.shape)

    def exact_y(t, x):
        sin_s, cos_s, decay = _sc(t, _rows(x))
        return (decay * cos_s)[:, 0]

    def exact_z(t, x):
        sin_s, cos_s, decay = _sc(t, _rows(x))
        return np.broadcast_to(-b_scalar * decay * sin_s, (x.shape[0], d))

    def exact_gamma(t, x):
        sin_s, cos_s, decay = _sc(t, _rows(x))
        return np.broadcast_to((-b_scalar * decay * cos_s)[:, :, None], (x.shape[0], d, d))

    return Problem(
        name="bounded_cosine",
        d=d,
        horizon=big_t,
        x0=x0,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=drift_jacobian,
        diffusion_jacobian_term=diffusion_jacobian_term,
        driver=driver,
        driver_grad_x=driver_grad_x,
        driver_grad_y=driver_grad_y,
        driver_grad_z=driver_grad_z,
        terminal=terminal,
        terminal_grad=terminal_grad,
        diffusion_inverse=lambda t, x: b_inverse,
        moments=(lambda t: x0 + a_scalar * t, lambda t: np.full(d, b_scalar * math.sqrt(t))),
        exact=ExactSolution(exact_y, exact_z, exact_gamma),
    )


# ---------------------------------------------------------------------------
# geometric-basket option pricing BSDE in log coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasketParams:
    """Market parameters of the d-asset geometric-basket call."""

    d: int = 50
    spot: float = 100.0
    strike: float = 100.0
    rate: float = 0.03
    returns: np.ndarray = None    # per-asset return rate a_k
    vols: np.ndarray = None       # per-asset volatility b_k
    dividends: np.ndarray = None  # per-asset dividend rate
    weights: np.ndarray = None    # geometric weights c_k, positive, sum 1

    def __post_init__(self):
        def fill(value, default):
            arr = np.full(self.d, default) if value is None else np.asarray(value, dtype=np.float64)
            if arr.shape != (self.d,):
                raise ValueError(f"parameter shape {arr.shape} does not match d={self.d}")
            return arr

        object.__setattr__(self, "returns", fill(self.returns, 0.05))
        object.__setattr__(self, "vols", fill(self.vols, 0.2))
        object.__setattr__(self, "dividends", fill(self.dividends, 0.0))
        object.__setattr__(self, "weights", fill(self.weights, 1.0 / self.d))
        if np.any(self.weights <= 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")

    @property
    def vol_bar(self):
        return math.sqrt(float(np.sum(np.square(self.vols * self.weights))))

    @property
    def dividend_bar(self):
        c, b, dl = self.weights, self.vols, self.dividends
        return float(np.sum(c * (dl + 0.5 * np.square(b)))) - 0.5 * self.vol_bar ** 2


def basket_call_closed_form(params, maturity, t, ln_state):
    """Value, delta-hedge row and both Jacobians of the basket call.

    Evaluates the lognormal closed form at time-to-maturity tau = T - t on
    log-price rows. Returns (value, z, gamma_ln, gamma_price) where
    gamma_ln is the Jacobian of z w.r.t. the log state and gamma_price
    w.r.t. the price state. At tau = 0 the almost-everywhere limits are
    used (the kink is a measure-zero event on simulated paths).
    """
    ln_state = _rows(ln_state)
    c, b = params.weights, params.vols
    strike, rate = params.strike, params.rate
    vol_bar, div_bar = params.vol_bar, params.dividend_bar
    tau = maturity - t
    basket = np.exp(ln_state @ c)[:, None]  # (B, 1) geometric basket level

    if tau < 1e-14:
        in_money = (basket > strike).astype(np.float64)
        value = np.maximum(basket - strike, 0.0)[:, 0]
        z = (c * b) * (basket * in_money)
        gamma_ln = (basket * in_money)[:, :, None] * np.outer(c, c * b)
    else:
        sq = vol_bar * math.sqrt(tau)
        d1 = (np.log(basket / strike) + (rate - div_bar + 0.5 * vol_bar**2) * tau) / sq
        d2 = d1 - sq
        disc_basket = math.exp(-div_bar * tau) * basket
        value = (disc_basket * norm_cdf(d1) - math.exp(-rate * tau) * strike * norm_cdf(d2))[:, 0]
        z = (c * b) * (disc_basket * norm_cdf(d1))
        curvature = disc_basket * (norm_cdf(d1) + norm_pdf(d1) / sq)
        gamma_ln = curvature[:, :, None] * np.outer(c, c * b)
    gamma_price = gamma_ln * np.exp(-ln_state)[:, :, None]
    return value, z, gamma_ln, gamma_price


def basket_option(d=50, horizon=0.5, params=None):
    """Basket-call pricing BSDE on log prices, so the diffusion is constant.

    The log transform makes drift and diffusion state-independent (exact
    Malliavin propagation); the delta-hedge process Z is invariant under
    the transform, and the reporting layer maps the Hessian back to price
    coordinates via the chain rule.
    """
    params = params if params is not None else BasketParams(d=d)
    if params.d != d:
        raise ValueError("params.d must match d")
    a, b, dl = params.returns, params.vols, params.dividends
    rate, strike, c = params.rate, params.strike, params.weights
    ln_drift = a - dl - 0.5 * np.square(b)
    b_matrix = np.diag(b)
    b_inverse = np.diag(1.0 / b)
    x0 = np.full(d, math.log(params.spot))
    risk_premium = (a - rate + dl) / b  # driver coefficient per asset
    big_t = float(horizon)

    def drift(t, x):
        return np.broadcast_to(ln_drift, x.shape)

    def diffusion(t, x):
        return b_matrix

    def terminal(x):
        basket = np.exp(_rows(x) @ c)
        return np.maximum(basket - strike, 0.0)

    def terminal_grad(x):
        basket = np.exp(_rows(x) @ c)[:, None]
        return c * basket * (basket > strike)  # left limit 0 at the kink

    def driver(t, x, y, z):
        return -(rate * y + ad.row_sum(z * risk_premium[None, :]))

    def driver_grad_x(t, x, y, z):
        return np.zeros_like(_rows(x))

    def driver_grad_y(t, x, y, z):
        return np.full((x.shape[0], 1), -rate)

    def driver_grad_z(t, x, y, z):
        return np.broadcast_to(-risk_premium, _rows(x).shape)

    def exact_y(t, x):
        return basket_call_closed_form(params, big_t, t, x)[0]

    def exact_z(t, x):
        return basket_call_closed_form(params, big_t, t, x)[1]

    def exact_gamma_ln(t, x):
        return basket_call_closed_form(params, big_t, t, x)[2]

    def exact_gamma_price(t, x):
        return basket_call_closed_form(params, big_t, t, x)[3]

    def map_gamma(t, x, gamma):
        return gamma * np.exp(-_rows(x))[:, :, None]

    return Problem(
        name="basket_option",
        d=d,
        horizon=big_t,
        x0=x0,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=lambda t, x: None,
        diffusion_jacobian_term=lambda t, x, dmat, dw: None,
        driver=driver,
        driver_grad_x=driver_grad_x,
        driver_grad_y=driver_grad_y,
        driver_grad_z=driver_grad_z,
        terminal=terminal,
        terminal_grad=terminal_grad,
        diffusion_inverse=lambda t, x: b_inverse,
        moments=(lambda t: x0 + ln_drift * t, lambda t: b * math.sqrt(t)),
        exact=ExactSolution(exact_y, exact_z, exact_gamma_ln),
        reporting=Reporting(
            exact=ExactSolution(exact_y, exact_z, exact_gamma_price),
            map_gamma=map_gamma,
        ),
    )


# ---------------------------------------------------------------------------
# stochastic control (HJB) BSDE with Monte-Carlo reference at t_0
# ---------------------------------------------------------------------------

def hjb_control(d=50, horizon=0.5):
    """Control problem whose value function has a log-expectation form.

    Driftless forward process with diffusion sqrt(0.2) * I; the driver is
    the negative squared control -sum((z_k / b)^2). No pathwise closed
    form is registered; a Monte-Carlo reference at t_0 is available via
    the t0_reference_factory.
    """
    b_scalar = math.sqrt(0.2)
    x0 = np.ones(d)
    b_matrix = b_scalar * np.eye(d)
    b_inverse = (1.0 / b_scalar) * np.eye(d)
    inv_bsq = 1.0 / (b_scalar * b_scalar)

    def terminal(x):
        return np.log(0.5 * (1.0 + np.sum(np.square(_rows(x)), axis=1)))

    def terminal_grad(x):
        x = _rows(x)
        return 2.0 * x / (1.0 + np.sum(np.square(x), axis=1, keepdims=True))

    def driver(t, x, y, z):
        return ad.row_sum(ad.square(z)) * (-inv_bsq)

    def driver_grad_z(t, x, y, z):
        return z * (-2.0 * inv_bsq)

    def reference(n_samples=10**6, n_runs=10, seed=0, compute_gamma=True):
        return hjb_reference(x0, b_scalar, horizon, terminal, terminal_grad,
                             n_samples=n_samples, n_runs=n_runs, seed=seed,
                             compute_gamma=compute_gamma)

    return Problem(
        name="hjb_control",
        d=d,
        horizon=float(horizon),
        x0=x0,
        drift=lambda t, x: np.zeros_like(_rows(x)),
        diffusion=lambda t, x: b_matrix,
        drift_jacobian=lambda t, x: None,
        diffusion_jacobian_term=lambda t, x, dmat, dw: None,
        driver=driver,
        driver_grad_x=lambda t, x, y, z: np.zeros_like(_rows(x)),
        driver_grad_y=lambda t, x, y, z: np.zeros((x.shape[0], 1)),
        driver_grad_z=driver_grad_z,
        terminal=terminal,
        terminal_grad=terminal_grad,
        diffusion_inverse=lambda t, x: b_inverse,
        moments=(lambda t: x0.copy(), lambda t: np.full(d, b_scalar * math.sqrt(t))),
        t0_reference_factory=reference,
    )


def hjb_reference(x0, b_scalar, horizon, terminal, terminal_grad,
                  n_samples=10**6, n_runs=10, seed=0, compute_gamma=True,
                  gamma_step=1e-3, chunk=100_000):
    """Monte-Carlo (Y_0, Z_0, Gamma_0) for the log-expectation value function.

    Y_0 = -ln E[exp(-g(x_0 + b W_T))]; the spatial gradient is the
    importance-weighted mean of grad g (differentiation under the
    expectation), and Gamma_0 comes from central finite differences of
    the Z_0 estimator with common random numbers across the shifted
    starting points. Runs n_runs independent replications and reports
    their mean, spread and standard errors.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    if n_samples < 10**4:
        raise ValueError("reference estimator needs at least 1e4 samples")
    eval_points = [x0]
    if compute_gamma:
        for j in range(d):
            for sign in (1.0, -1.0):
                shifted = x0.copy()
                shifted[j] += sign * gamma_step
                eval_points.append(shifted)
    eval_points = np.stack(eval_points)  # (P, d)
    n_points = eval_points.shape[0]
    scale = b_scalar * math.sqrt(horizon)

    runs = []
    for run in range(n_runs):
        sum_w = np.zeros(n_points)
        sum_wsq = 0.0
        sum_wg = np.zeros((n_points, d))
        done = 0
        part = 0
        while done < n_samples:
            m = min(chunk, n_samples - done)
            w_t = rng.standard_normals(seed, rng.derive_stream("hjb-ref", run, part), m, d) * scale
            for p in range(n_points):
                y = eval_points[p][None, :] + w_t
                weights = np.exp(-terminal(y))
                sum_w[p] += weights.sum()
                sum_wg[p] += (weights[:, None] * terminal_grad(y)).sum(axis=0)
                if p == 0:
                    sum_wsq += float(np.square(weights).sum())
            done += m
            part += 1
        mean_w = sum_w / n_samples
        if np.any(mean_w <= 0.0) or not np.all(np.isfinite(mean_w)):
            raise BsdeLearnError("degenerate importance weights in reference estimator")
        y0 = -math.log(mean_w[0])
        var_w = sum_wsq / n_samples - mean_w[0] ** 2
        y0_se = math.sqrt(max(var_w, 0.0) / n_samples) / mean_w[0]  # delta method
        grad_u = sum_wg / sum_w[:, None]  # E[w grad g] / E[w] per point
        z_points = b_scalar * grad_u
        result = {"y0": y0, "y0_se": y0_se, "z0": z_points[0]}
        if compute_gamma:
            gamma = np.empty((d, d))
            for j in range(d):
                z_plus = z_points[1 + 2 * j]
                z_minus = z_points[2 + 2 * j]
                gamma[j] = (z_plus - z_minus) / (2.0 * gamma_step)
            result["gamma0"] = gamma
        runs.append(result)

    out = {
        "n_samples": n_samples,
        "n_runs": n_runs,
        "y0": float(np.mean([r["y0"] for r in runs])),
        "y0_se": math.sqrt(sum(r["y0_se"] ** 2 for r in runs)) / n_runs,
        "z0": np.mean([r["z0"] for r in runs], axis=0),
        "runs": runs,
    }
    if n_runs > 1:
        out["y0_spread"] = float(np.std([r["y0"] for r in runs]))
        out["z0_se"] = np.std([r["z0"] for r in runs], axis=0) / math.sqrt(n_runs)
    if compute_gamma:
        out["gamma0"] = np.mean([r["gamma0"] for r in runs], axis=0)
        if n_runs > 1:
            out["gamma0_se"] = np.std([r["gamma0"] for r in runs], axis=0) / math.sqrt(n_runs)
    return out


REGISTRY = {
    "bounded_cosine": bounded_cosine,
    "basket_option": basket_option,
    "hjb_control": hjb_control,
}


def make_problem(name, d, horizon, **kwargs):
    if name not in REGISTRY:
        raise KeyError(f"unknown problem '{name}', have {sorted(REGISTRY)}")
    if name == "basket_option" and kwargs:
        return basket_option(d=d, horizon=horizon, params=BasketParams(d=d, **kwargs))
    return REGISTRY[name](d, horizon)
