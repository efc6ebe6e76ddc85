"""Feed-forward approximators with per-time-point input normalization.

All three approximators (value, gradient, Hessian-product) share one
architecture: inputs (t, x) of size 1+d, four tanh hidden layers of
100+d units by default, and a linear output head. The spatial input is
standardized with the forward process' per-time-point moments, except at
the initial time point where the standard deviation is zero and the raw
state is fed instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import NonFiniteError, ShapeError

DEFAULT_HIDDEN_LAYERS = 4


def default_hidden_units(d):
    return 100 + d


@dataclass
class MlpParams:
    """Per-layer weights in (out, in) orientation plus bias vectors."""

    weights: list
    biases: list

    @property
    def d_in(self):
        return self.weights[0].shape[1]

    @property
    def d_out(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(d_in, d_out, hidden_layers, hidden_units, seed, stream=0):
    """Glorot-uniform weights, zero biases; deterministic in (seed, stream)."""
    sizes = [d_in] + [hidden_units] * hidden_layers + [d_out]
    if min(sizes) < 1:
        raise ValueError(f"zero-sized layer in {sizes}")
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        sub = rng.derive_stream("mlp-init", stream, layer)
        weights.append(rng.glorot_uniform(seed, sub, fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class NetworkTriple:
    """Value, gradient and Hessian-product networks (outputs 1, d, d*d)."""

    y: MlpParams
    z: MlpParams
    gamma: MlpParams

    @classmethod
    def create(cls, d, hidden_layers, hidden_units, seed):
        def make(d_out, tag):
            return mlp_init(1 + d, d_out, hidden_layers, hidden_units, seed,
                            stream=rng.derive_stream("net", tag))

        return cls(y=make(1, "y"), z=make(d, "z"), gamma=make(d * d, "gamma"))

    def arrays(self):
        return self.y.arrays() + self.z.arrays() + self.gamma.arrays()


class MomentNormalizer:
    """Per-time-point mean/std of the forward state on a fixed grid.

    Row 0 is the sentinel (mu=0, sigma=1): no normalization at t_0.
    """

    def __init__(self, mu, sigma):
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if mu.shape != sigma.shape or mu.ndim != 2:
            raise ShapeError("moment arrays must both be (N+1, d)")
        if np.any(sigma[1:] <= 0.0):
            raise ValueError("standard deviations must be positive for n >= 1")
        self.mu = mu
        self.sigma = sigma

    @classmethod
    def from_problem(cls, problem, grid, n_samples=100_000, seed=0):
        """Closed-form moments when the problem registers them, else empirical.

        The empirical fallback estimates moments from a chunked
        pre-simulation of n_samples Euler paths on the same grid.
        """
        times = grid.times()
        d = problem.d
        if problem.moments is not None:
            mean_fn, std_fn = problem.moments
            mu = np.stack([np.broadcast_to(mean_fn(t), (d,)) for t in times])
            sigma = np.stack([np.broadcast_to(std_fn(t), (d,)) for t in times])
        else:
            from .simulation import simulate_paths

            total = np.zeros((grid.n_steps + 1, d))
            total_sq = np.zeros((grid.n_steps + 1, d))
            chunk = 10_000
            n_done = 0
            part = 0
            while n_done < n_samples:
                b = min(chunk, n_samples - n_done)
                batch = simulate_paths(problem, grid, b, seed,
                                       stream=rng.derive_stream("moments", part))
                total += batch.states.sum(axis=0)
                total_sq += np.square(batch.states).sum(axis=0)
                n_done += b
                part += 1
            mu = total / n_done
            var = total_sq / n_done - np.square(mu)
            sigma = np.sqrt(np.maximum(var, 0.0))
        mu[0] = 0.0
        sigma[0] = 1.0
        return cls(mu, sigma)

    def stack_rows(self, times, states, n_points):
        """Time-major network inputs for the first n_points grid times.

        states: (B, N+1, d). Returns (V, inv_sigma) with V of shape
        (n_points*B, 1+d) holding (t_n, normalized x) and inv_sigma the
        matching 1/sigma_n rows (ones at n=0).
        """
        n_paths, _, d = states.shape
        rows = n_points * n_paths
        v = np.empty((rows, 1 + d))
        inv_sigma = np.empty((rows, d))
        for n in range(n_points):
            block = slice(n * n_paths, (n + 1) * n_paths)
            v[block, 0] = times[n]
            v[block, 1:] = (states[:, n, :] - self.mu[n]) / self.sigma[n]
            inv_sigma[block] = 1.0 / self.sigma[n]
        return v, inv_sigma

    def single_row(self, t, x, n):
        x = np.asarray(x, dtype=np.float64)
        v = np.concatenate([[t], (x - self.mu[n]) / self.sigma[n]])
        return v[None, :], (1.0 / self.sigma[n])[None, :]

    def rows_at(self, t, states, n):
        """Inputs and 1/sigma rows for a batch of states at one grid index."""
        states = np.asarray(states, dtype=np.float64)
        n_paths, d = states.shape
        v = np.empty((n_paths, 1 + d))
        v[:, 0] = t
        v[:, 1:] = (states - self.mu[n]) / self.sigma[n]
        inv_sigma = np.ascontiguousarray(
            np.broadcast_to(1.0 / self.sigma[n], states.shape))
        return v, inv_sigma


def identity_normalizer(n_points, d):
    """Normalizer that leaves inputs untouched (testing convenience)."""
    return MomentNormalizer(np.zeros((n_points, d)), np.ones((n_points, d)))


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def bind_params(tape, params):
    """Register one network's arrays on a tape as trainable nodes."""
    return [(tape.parameter(w), tape.parameter(b))
            for w, b in zip(params.weights, params.biases)]


def mlp_rows(tape, bound, v):
    """Forward pass over input rows; returns (output node, hidden tanh nodes)."""
    if not isinstance(v, ad.Node):
        v = tape.constant(v)
    hiddens = []
    h = v
    for w, b in bound[:-1]:
        h = ad.tanh(ad.affine(h, w, b))
        hiddens.append(h)
    out = ad.affine(h, *bound[-1])
    return out, hiddens


def z_rows(tape, bound, hiddens, inv_sigma, diffusion):
    """AD-based Z rows: (grad_x of the scalar net) times the diffusion matrix.

    The gradient w.r.t. the raw state x includes the 1/sigma_n chain-rule
    factor of the input normalization; the time column does not
    contribute. diffusion is a (d, d) matrix shared by all rows or an
    (R, d, d) per-row stack.
    """
    n_rows, d = inv_sigma.shape
    g = ad.input_gradient_rows(bound, hiddens, n_rows)  # (R, 1+d) w.r.t. (t, x_norm)
    gx = ad.slice_axis(g, 1, 1, 1 + d)
    gx = ad.mul(gx, tape.constant(inv_sigma))
    diffusion = np.asarray(diffusion, dtype=np.float64)
    if diffusion.ndim == 2:
        return ad.matmul(gx, tape.constant(diffusion))
    z3 = ad.matmul(ad.reshape(gx, (n_rows, 1, d)), tape.constant(diffusion))
    return ad.reshape(z3, (n_rows, d))


# ---------------------------------------------------------------------------
# point-wise evaluations
# ---------------------------------------------------------------------------

def mlp_forward(params, t, x, normalizer, n):
    """Network output at one (t_n, x); raw x is fed when n == 0."""
    v, _ = normalizer.single_row(t, x, n)
    tape = ad.Tape()
    out, _ = mlp_rows(tape, bind_params(tape, params), v)
    value = out.value[0]
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite network output")
    return value


def z_via_ad(params, t, x, normalizer, n, b_eval):
    """Gradient-based Z at one point, as a length-d row."""
    v, inv_sigma = normalizer.single_row(t, x, n)
    tape = ad.Tape()
    bound = bind_params(tape, params)
    _, hiddens = mlp_rows(tape, bound, v)
    z = z_rows(tape, bound, hiddens, inv_sigma, np.asarray(b_eval, dtype=np.float64))
    return z.value[0]


def z_eval_rows(params, v, inv_sigma, diffusion):
    """Batched value-only evaluation of the AD-based Z over input rows."""
    tape = ad.Tape()
    bound = bind_params(tape, params)
    _, hiddens = mlp_rows(tape, bound, v)
    return z_rows(tape, bound, hiddens, inv_sigma, diffusion).value


def mlp_eval_at(params, t, states, normalizer, n):
    """Value-only forward pass for a batch of states at one grid index."""
    v, _ = normalizer.rows_at(t, states, n)
    tape = ad.Tape()
    out, _ = mlp_rows(tape, bind_params(tape, params), v)
    return out.value


def z_eval_at(params, t, states, normalizer, n, b_fn):
    """AD-based Z for a batch of states at one grid index."""
    v, inv_sigma = normalizer.rows_at(t, states, n)
    return z_eval_rows(params, v, inv_sigma, np.asarray(b_fn(t, states), dtype=np.float64))


def gamma_fd_at(params, t, states, normalizer, n, b_fn, step_scale=1e-5):
    """Central-difference Jacobian of Z for a batch of states at one index."""
    states = np.asarray(states, dtype=np.float64)
    n_paths, d = states.shape
    h = step_scale * (1.0 + np.linalg.norm(states, axis=1))
    gamma = np.empty((n_paths, d, d))
    for j in range(d):
        plus = states.copy()
        minus = states.copy()
        plus[:, j] += h
        minus[:, j] -= h
        zp = z_eval_at(params, t, plus, normalizer, n, b_fn)
        zm = z_eval_at(params, t, minus, normalizer, n, b_fn)
        gamma[:, j, :] = (zp - zm) / (2.0 * h)[:, None]
    return gamma


def gamma_via_ad(params, t, x, normalizer, n, b_fn, step_scale=1e-5):
    """Jacobian of the AD-based Z w.r.t. x by central finite differences.

    b_fn(t, x) supplies the diffusion matrix at the perturbed states. The
    step is step_scale * (1 + |x|). Intended for evaluation after
    training, not inside a loss graph.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    h = step_scale * (1.0 + np.linalg.norm(x))
    gamma = np.empty((d, d))
    for j in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        zp = z_via_ad(params, t, xp, normalizer, n, b_fn(t, xp))
        zm = z_via_ad(params, t, xm, normalizer, n, b_fn(t, xm))
        gamma[j] = (zp - zm) / (2.0 * h)
    return gamma


def gamma_fd_rows(params, times, states, normalizer, n_points, b_fn, step_scale=1e-5):
    """Batched central-difference Jacobian of Z over grid-aligned rows.

    states: (B, N+1, d); returns (n_points*B, d, d) with entry (j, k)
    holding dZ_k/dx_j. Each x-component costs two batched z evaluations.
    """
    n_paths, _, d = states.shape
    rows = n_points * n_paths
    norms = np.linalg.norm(states[:, :n_points, :], axis=2)  # (B, n)
    h = step_scale * (1.0 + norms.T.reshape(rows))  # time-major rows
    gamma = np.empty((rows, d, d))
    for j in range(d):
        shifted = np.zeros_like(states[:, :n_points, :])
        shifted[:, :, j] = h.reshape(n_points, n_paths).T
        for sign in (1.0, -1.0):
            pert = states.copy()
            pert[:, :n_points, :] = states[:, :n_points, :] + sign * shifted
            v, inv_sigma = normalizer.stack_rows(times, pert, n_points)
            diff = _diffusion_rows(b_fn, times, pert, n_points)
            z = z_eval_rows(params, v, inv_sigma, diff)
            if sign > 0:
                zp = z
            else:
                zm = z
        gamma[:, j, :] = (zp - zm) / (2.0 * h)[:, None]
    return gamma


def _diffusion_rows(b_fn, times, states, n_points):
    first = np.asarray(b_fn(times[0], states[:, 0, :]), dtype=np.float64)
    if first.ndim == 2:
        return first  # state-independent diffusion
    n_paths, _, d = states.shape
    stack = np.empty((n_points * n_paths, d, d))
    stack[:n_paths] = first
    for n in range(1, n_points):
        stack[n * n_paths:(n + 1) * n_paths] = b_fn(times[n], states[:, n, :])
    return stack


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, networks):
    """Write named MlpParams to an .npz file; round-trips bit-exactly."""
    payload = {"format_version": np.array(CHECKPOINT_VERSION)}
    for name, params in networks.items():
        payload[f"{name}.n_layers"] = np.array(len(params.weights))
        for l, (w, b) in enumerate(zip(params.weights, params.biases)):
            payload[f"{name}.w{l}"] = w
            payload[f"{name}.b{l}"] = b
    np.savez(path, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        names = {key.split(".")[0] for key in data.files if key.endswith(".n_layers")}
        out = {}
        for name in sorted(names):
            n_layers = int(data[f"{name}.n_layers"])
            out[name] = MlpParams(
                weights=[data[f"{name}.w{l}"] for l in range(n_layers)],
                biases=[data[f"{name}.b{l}"] for l in range(n_layers)],
            )
    return out
