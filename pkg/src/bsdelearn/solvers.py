"""Training loop and estimator-style solver classes for both schemes."""

from __future__ import annotations

import inspect
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import NonFiniteError, TrainingDiverged
from .losses import default_weights, dldbsde_loss, ldbsde_loss
from .networks import (
    DEFAULT_HIDDEN_LAYERS,
    MomentNormalizer,
    NetworkTriple,
    bind_params,
    default_hidden_units,
    gamma_fd_at,
    gamma_fd_rows,
    mlp_eval_at,
    mlp_init,
    mlp_rows,
    save_checkpoint,
    z_eval_at,
)
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm, lr_at
from .simulation import TimeGrid, malliavin_propagate, simulate_paths
from .validation import check_fitted, check_states, grid_index_for_time

SCHEMES = ("LDBSDE", "DLDBSDE")


@dataclass
class TrainConfig:
    """One training run: scheme, grid, budget, schedule, seeding."""

    scheme: str
    grid: TimeGrid
    batch_size: int = 128
    n_iterations: int = 60000
    schedule: LrSchedule = None
    weight_y: float = None
    weight_z: float = None
    seed: int = 0
    hidden_layers: int = DEFAULT_HIDDEN_LAYERS
    hidden_units: int = None
    track_gamma: bool = False
    nan_retries: int = 3
    gradient_clip: float = None
    checkpoint_every: int = None
    checkpoint_dir: str = None

    def resolve(self, d):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}'")
        schedule = self.schedule or LrSchedule.for_steps(max(self.n_iterations, 1))
        wy, wz = self.weight_y, self.weight_z
        if wy is None and wz is None:
            wy, wz = default_weights(d)
        elif wy is None:
            wy = 1.0 - wz
        elif wz is None:
            wz = 1.0 - wy
        units = self.hidden_units if self.hidden_units is not None else default_hidden_units(d)
        return schedule, wy, wz, units


@dataclass
class TrainResult:
    scheme: str
    networks: dict
    loss_history: np.ndarray
    lr_history: np.ndarray
    step_ms: np.ndarray
    runtime_seconds: float
    n_retries: int
    normalizer: MomentNormalizer
    grid: TimeGrid
    gamma_rms: np.ndarray = field(default=None, repr=False)

    @property
    def mean_step_ms(self):
        return float(self.step_ms.mean()) if self.step_ms.size else 0.0


def _init_networks(config, problem, units):
    if config.scheme == "LDBSDE":
        y = mlp_init(1 + problem.d, 1, config.hidden_layers, units, config.seed,
                     stream=rng.derive_stream("net", "y"))
        return {"y": y}
    triple = NetworkTriple.create(problem.d, config.hidden_layers, units, config.seed)
    return {"y": triple.y, "z": triple.z, "gamma": triple.gamma}


def _loss_graph(config, networks, problem, batch, normalizer, wy, wz):
    if config.scheme == "LDBSDE":
        return ldbsde_loss(networks["y"], problem, batch, normalizer)
    triple = NetworkTriple(networks["y"], networks["z"], networks["gamma"])
    return dldbsde_loss(triple, problem, batch, normalizer, wy, wz)


def train(config, problem, normalizer=None):
    """Run the configured number of Adam steps on freshly simulated batches.

    Every step simulates an independent batch; a step whose loss or
    gradients come out non-finite is retried on fresh batches up to
    nan_retries times before training aborts. With track_gamma the
    Hessian process is additionally evaluated on each step's batch (a
    network pass for the differential scheme, finite differences of the
    tape gradient for the baseline), matching the per-step cost model of
    the runtime comparison.
    """
    if normalizer is None:
        normalizer = MomentNormalizer.from_problem(
            problem, config.grid, seed=rng.derive_stream("moments", config.seed))
    schedule, wy, wz, units = config.resolve(problem.d)
    networks = _init_networks(config, problem, units)
    # parameter order must match the loss graphs: y, then z, then gamma
    params = []
    order = ["y"] if config.scheme == "LDBSDE" else ["y", "z", "gamma"]
    for name in order:
        params.extend(networks[name].arrays())
    adam = AdamState.for_params(params)

    n_iter = config.n_iterations
    losses = np.empty(n_iter)
    rates = np.empty(n_iter)
    step_ms = np.empty(n_iter)
    gamma_rms = np.empty(n_iter) if config.track_gamma else None
    needs_malliavin = config.scheme == "DLDBSDE" and wz != 0.0
    times = config.grid.times()
    n_retries = 0
    start = time.perf_counter()

    for k in range(1, n_iter + 1):
        tick = time.perf_counter()
        graph = None
        grads = None
        for attempt in range(config.nan_retries + 1):
            stream = rng.derive_stream("batch", k, attempt)
            batch = simulate_paths(problem, config.grid, config.batch_size,
                                   config.seed, stream=stream)
            if needs_malliavin:
                malliavin_propagate(problem, batch)
            try:
                candidate = _loss_graph(config, networks, problem, batch,
                                        normalizer, wy, wz)
                if not np.isfinite(candidate.value):
                    raise NonFiniteError(f"non-finite loss at step {k}")
                candidate_grads = candidate.parameter_gradients()
                if not all(np.all(np.isfinite(g)) for g in candidate_grads):
                    raise NonFiniteError(f"non-finite gradient at step {k}")
            except NonFiniteError:
                n_retries += 1
                if attempt == config.nan_retries:
                    raise TrainingDiverged(
                        f"step {k} stayed non-finite after {config.nan_retries} retries")
                continue
            graph, grads = candidate, candidate_grads
            break

        if config.gradient_clip is not None:
            grads = clip_global_norm(grads, config.gradient_clip)
        rate = lr_at(schedule, k)
        adam_step(adam, params, grads, rate)

        if config.track_gamma:
            gamma_rms[k - 1] = _tracked_gamma_rms(config, networks, problem,
                                                  batch, normalizer)
        losses[k - 1] = graph.value
        rates[k - 1] = rate
        step_ms[k - 1] = (time.perf_counter() - tick) * 1e3

        if config.checkpoint_every and k % config.checkpoint_every == 0:
            path = os.path.join(config.checkpoint_dir or ".", f"checkpoint_{k:07d}.npz")
            save_checkpoint(path, networks)

    runtime = time.perf_counter() - start
    return TrainResult(scheme=config.scheme, networks=networks,
                       loss_history=losses, lr_history=rates, step_ms=step_ms,
                       runtime_seconds=runtime, n_retries=n_retries,
                       normalizer=normalizer, grid=config.grid,
                       gamma_rms=gamma_rms)


def _tracked_gamma_rms(config, networks, problem, batch, normalizer):
    """Evaluate the Hessian process over the step's batch; returns its RMS."""
    times = batch.grid.times()
    n_points = batch.grid.n_steps + 1
    if config.scheme == "LDBSDE":
        gamma = gamma_fd_rows(networks["y"], times, batch.states, normalizer,
                              n_points, problem.diffusion)
    else:
        v, _ = normalizer.stack_rows(times, batch.states, n_points)
        tape = ad.Tape()
        out, _ = mlp_rows(tape, bind_params(tape, networks["gamma"]), v)
        gamma = out.value
    return float(np.sqrt(np.mean(np.square(gamma))))


# ---------------------------------------------------------------------------
# estimator API
# ---------------------------------------------------------------------------

class _ForwardSolver:
    """Shared estimator plumbing: parameter handling, fit, prediction."""

    _scheme = None

    def __init__(self, n_time_steps=8, batch_size=128, n_iterations=60000,
                 learning_rate_schedule=None, seed=0,
                 hidden_layers=DEFAULT_HIDDEN_LAYERS, hidden_units=None,
                 track_gamma=False, nan_retries=3, gradient_clip=None):
        self.n_time_steps = n_time_steps
        self.batch_size = batch_size
        self.n_iterations = n_iterations
        self.learning_rate_schedule = learning_rate_schedule
        self.seed = seed
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.track_gamma = track_gamma
        self.nan_retries = nan_retries
        self.gradient_clip = gradient_clip

    @classmethod
    def _parameter_names(cls):
        signature = inspect.signature(cls.__init__)
        return sorted(p for p in signature.parameters if p != "self")

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._parameter_names()}

    def set_params(self, **params):
        valid = set(self._parameter_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter '{name}' for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def _train_config(self):
        return TrainConfig(
            scheme=self._scheme,
            grid=TimeGrid(self._problem.horizon, self.n_time_steps),
            batch_size=self.batch_size,
            n_iterations=self.n_iterations,
            schedule=self.learning_rate_schedule,
            seed=self.seed,
            hidden_layers=self.hidden_layers,
            hidden_units=self.hidden_units,
            track_gamma=self.track_gamma,
            nan_retries=self.nan_retries,
            gradient_clip=self.gradient_clip,
            **self._extra_config(),
        )

    def _extra_config(self):
        return {}

    def fit(self, problem):
        """Train on freshly simulated paths of the given problem."""
        self._problem = problem
        result = train(self._train_config(), problem)
        self.problem_ = problem
        self.grid_ = result.grid
        self.normalizer_ = result.normalizer
        self.networks_ = result.networks
        self.loss_history_ = result.loss_history
        self.lr_history_ = result.lr_history
        self.step_times_ms_ = result.step_ms
        self.runtime_seconds_ = result.runtime_seconds
        self.n_retries_ = result.n_retries
        return self

    # prediction -----------------------------------------------------------

    def predict(self, t, states):
        """Value-process prediction at a grid time for a batch of states."""
        return self.predict_triple(t, states)[0]

    def predict_triple(self, t, states):
        """(Y, Z, Gamma) at one grid time; shapes (B,), (B, d), (B, d, d)."""
        check_fitted(self)
        states = check_states(states, self.problem_.d)
        n = grid_index_for_time(self.grid_, t)
        return self._evaluate_at(float(t), states, n)

    def predict_grid(self, states):
        """(Y, Z, Gamma) on every grid point of (B, N+1, d) state paths."""
        check_fitted(self)
        states = np.asarray(states, dtype=np.float64)
        n_points = self.grid_.n_steps + 1
        if states.ndim != 3 or states.shape[1] != n_points:
            raise ValueError(f"expected states of shape (B, {n_points}, d)")
        times = self.grid_.times()
        ys, zs, gs = [], [], []
        for n in range(n_points):
            y, z, gamma = self._evaluate_at(times[n], states[:, n, :], n)
            ys.append(y)
            zs.append(z)
            gs.append(gamma)
        return np.stack(ys, axis=1), np.stack(zs, axis=1), np.stack(gs, axis=1)

    def _evaluate_at(self, t, states, n):
        raise NotImplementedError


class LDBSDESolver(_ForwardSolver):
    """Baseline forward scheme: one value network, gradients from the tape.

    Z comes from the input gradient of the value network; Gamma is only
    available through central finite differences of that gradient, which
    is what makes tracking it per optimization step expensive.
    """

    _scheme = "LDBSDE"

    def _evaluate_at(self, t, states, n):
        problem = self.problem_
        y = mlp_eval_at(self.networks_["y"], t, states, self.normalizer_, n)[:, 0]
        z = z_eval_at(self.networks_["y"], t, states, self.normalizer_, n,
                      problem.diffusion)
        gamma = gamma_fd_at(self.networks_["y"], t, states, self.normalizer_, n,
                            problem.diffusion)
        return y, z, gamma


class DLDBSDESolver(_ForwardSolver):
    """Differential forward scheme: value, gradient and Hessian networks
    trained jointly on the dynamics of the BSDE and of its Malliavin
    derivative."""

    _scheme = "DLDBSDE"

    def __init__(self, n_time_steps=8, batch_size=128, n_iterations=60000,
                 learning_rate_schedule=None, seed=0,
                 hidden_layers=DEFAULT_HIDDEN_LAYERS, hidden_units=None,
                 track_gamma=False, nan_retries=3, gradient_clip=None,
                 loss_weights=None):
        super().__init__(n_time_steps=n_time_steps, batch_size=batch_size,
                         n_iterations=n_iterations,
                         learning_rate_schedule=learning_rate_schedule,
                         seed=seed, hidden_layers=hidden_layers,
                         hidden_units=hidden_units, track_gamma=track_gamma,
                         nan_retries=nan_retries, gradient_clip=gradient_clip)
        self.loss_weights = loss_weights

    def _extra_config(self):
        if self.loss_weights is None:
            return {}
        wy, wz = self.loss_weights
        return {"weight_y": wy, "weight_z": wz}

    def _evaluate_at(self, t, states, n):
        d = self.problem_.d
        y = mlp_eval_at(self.networks_["y"], t, states, self.normalizer_, n)[:, 0]
        z = mlp_eval_at(self.networks_["z"], t, states, self.normalizer_, n)
        gamma = mlp_eval_at(self.networks_["gamma"], t, states, self.normalizer_, n)
        return y, z, gamma.reshape(-1, d, d)
