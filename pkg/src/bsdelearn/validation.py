"""Input validation helpers for the solver API."""

from __future__ import annotations

import numpy as np

from .errors import NotFittedError, ShapeError


def check_states(states, d):
    """Coerce to a (B, d) float64 array of finite states."""
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ShapeError(f"expected states of shape (B, {d}), got {np.shape(states)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("states contain non-finite entries")
    return arr


def check_fitted(solver, attribute="networks_"):
    if not hasattr(solver, attribute):
        raise NotFittedError(f"{type(solver).__name__} is not fitted; call fit() first")


def grid_index_for_time(grid, t, tol=1e-9):
    """Map a time to its grid index; reject off-grid times."""
    position = t / grid.dt
    index = int(round(position))
    if index < 0 or index > grid.n_steps or abs(position - index) > tol * max(1.0, grid.n_steps):
        raise ValueError(f"t={t} is not a grid point of {grid}")
    return index
