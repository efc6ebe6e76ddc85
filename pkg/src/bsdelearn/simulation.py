"""Euler-Maruyama forward simulation and discrete Malliavin propagation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import NonFiniteError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T with t_n = n * dt."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.n_steps < 1:
            raise ValueError("need horizon > 0 and at least one step")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass
class PathBatch:
    """Simulated forward paths plus their one-step Malliavin derivatives.

    states: (B, N+1, d); increments: (B, N, d) Gaussian with variance dt.
    dx_diag[b, n] approximates D_n X_n (equal to the diffusion matrix at
    (t_n, X_n)); dx_next[b, n] approximates D_n X_{n+1}. The deeper
    recursion is never materialized: the losses only reference these two.
    """

    grid: TimeGrid
    states: np.ndarray
    increments: np.ndarray
    dx_diag: np.ndarray = field(default=None, repr=False)
    dx_next: np.ndarray = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def d(self):
        return self.states.shape[2]


def _apply_diffusion(b, dw):
    if b.ndim == 2:
        return dw @ b.T
    return np.einsum("rij,rj->ri", b, dw)


def euler_step(problem, t, x, dt, dw):
    """One explicit Euler-Maruyama update for a batch of states."""
    a = np.asarray(problem.drift(t, x), dtype=np.float64)
    b = np.asarray(problem.diffusion(t, x), dtype=np.float64)
    return x + a * dt + _apply_diffusion(b, dw)


def brownian_increments(grid, n_paths, d, seed, stream=0):
    normals = rng.standard_normals(seed, stream, n_paths, grid.n_steps * d)
    return normals.reshape(n_paths, grid.n_steps, d) * np.sqrt(grid.dt)


def simulate_paths(problem, grid, n_paths, seed, stream=0):
    """Simulate a batch of Euler paths; bit-identical for a given (seed, stream)."""
    d = problem.d
    increments = brownian_increments(grid, n_paths, d, seed, stream)
    states = np.empty((n_paths, grid.n_steps + 1, d))
    states[:, 0, :] = problem.x0
    times = grid.times()
    dt = grid.dt
    for n in range(grid.n_steps):
        x = states[:, n, :]
        states[:, n + 1, :] = euler_step(problem, times[n], x, dt, increments[:, n, :])
        if not np.all(np.isfinite(states[:, n + 1, :])):
            raise NonFiniteError(f"forward state blew up at step {n + 1}")
    return PathBatch(grid=grid, states=states, increments=increments)


def malliavin_propagate(problem, batch):
    """Fill dx_diag (D_n X_n) and dx_next (D_n X_{n+1}) on a simulated batch.

    D_n X_n equals the diffusion matrix at (t_n, X_n); the one-step
    propagation adds the drift- and diffusion-Jacobian corrections. The
    problem must register both Jacobians (explicit zero callables for
    constant coefficients).
    """
    if problem.drift_jacobian is None or problem.diffusion_jacobian_term is None:
        raise ValueError(f"problem '{problem.name}' lacks coefficient derivatives "
                         "required for Malliavin propagation")
    n_paths, n_points, d = batch.states.shape
    n_steps = batch.grid.n_steps
    times = batch.grid.times()
    dt = batch.grid.dt

    dx_diag = np.empty((n_paths, n_points, d, d))
    for n in range(n_points):
        b = np.asarray(problem.diffusion(times[n], batch.states[:, n, :]), dtype=np.float64)
        dx_diag[:, n] = b  # broadcasts when b is a constant (d, d)

    dx_next = np.empty((n_paths, n_steps, d, d))
    for n in range(n_steps):
        x = batch.states[:, n, :]
        diag = dx_diag[:, n]
        nabla_a = problem.drift_jacobian(times[n], x)
        step = diag.copy()
        if nabla_a is not None:
            step += dt * (np.asarray(nabla_a, dtype=np.float64) @ diag)
        jac_term = problem.diffusion_jacobian_term(times[n], x, diag, batch.increments[:, n, :])
        if jac_term is not None:
            step += jac_term
        dx_next[:, n] = step
    batch.dx_diag = dx_diag
    batch.dx_next = dx_next
    return batch


def dump_paths(batch, fileobj):
    """Debug CSV: one row per (time point, path) with state and increment."""
    d = batch.d
    writer = csv.writer(fileobj)
    writer.writerow(["n", "path"] + [f"x{k}" for k in range(d)] + [f"dw{k}" for k in range(d)])
    for n in range(batch.grid.n_steps + 1):
        for j in range(batch.n_paths):
            dw = list(batch.increments[j, n]) if n < batch.grid.n_steps else [""] * d
            writer.writerow([n, j] + list(batch.states[j, n]) + dw)
