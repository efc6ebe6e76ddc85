"""Training objectives of the two forward schemes.

Both losses sum squared one-step defects of the discretized dynamics over
every grid interval plus a terminal mismatch, averaged over the batch.
The baseline loss constrains only the value process, with its gradient
read off the tape; the differential loss adds the dynamics of the
Malliavin derivative, which constrains the gradient and Hessian networks
directly.

All network evaluations are batched over (time point, path) rows in
time-major order, so one affine pass per layer covers the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import bind_params, mlp_rows, z_rows


@dataclass(frozen=True)
class DriverEval:
    """Driver value and partial derivatives at one point (t, x, y, z)."""

    value: float
    grad_x: np.ndarray  # (1, d)
    grad_y: float
    grad_z: np.ndarray  # (1, d)


def malliavin_driver_derivative(driver_eval, dx, dy, dz):
    """Total derivative of the driver along Malliavin directions, a 1 x d row.

    dx and dz are d x d matrices, dy a 1 x d row; the result is
    grad_x @ dx + grad_y * dy + grad_z @ dz.
    """
    return (np.asarray(driver_eval.grad_x) @ dx
            + driver_eval.grad_y * np.asarray(dy)
            + np.asarray(driver_eval.grad_z) @ dz)


def _time_major(arr):
    """(B, n, ...) -> (n*B, ...) with all paths of t_0 first."""
    moved = np.moveaxis(arr, 0, 1)
    return moved.reshape((-1,) + arr.shape[2:])


@dataclass
class LossContext:
    """Precomputed constant rows shared by the loss builders."""

    n_steps: int
    n_paths: int
    d: int
    dt: float
    inputs: np.ndarray          # ((N+1)*B, 1+d) normalized network inputs
    inv_sigma: np.ndarray       # ((N+1)*B, d)
    t_col: np.ndarray           # (N*B, 1) times of the residual rows
    x_rows: np.ndarray          # (N*B, d) states of the residual rows
    dw_rows: np.ndarray         # (N*B, d)
    diffusion_all: np.ndarray   # (d, d) or ((N+1)*B, d, d)
    terminal_value: np.ndarray  # (B, 1)
    terminal_zref: np.ndarray   # (B, d) terminal-gradient rows times diffusion
    dx_diag_rows: np.ndarray = None   # (N*B, d, d)
    dx_next_rows: np.ndarray = None   # (N*B, d, d)
    binv_next_rows: np.ndarray = None

    @classmethod
    def prepare(cls, problem, batch, normalizer, with_malliavin):
        grid = batch.grid
        n_steps, n_paths, d = grid.n_steps, batch.n_paths, batch.d
        times = grid.times()
        states = batch.states
        inputs, inv_sigma = normalizer.stack_rows(times, states, n_steps + 1)
        t_col = np.repeat(times[:n_steps], n_paths)[:, None]
        x_rows = _time_major(states[:, :n_steps, :])
        dw_rows = _time_major(batch.increments)

        terminal_states = states[:, n_steps, :]
        b_last = np.asarray(problem.diffusion(times[-1], terminal_states), dtype=np.float64)
        gx = problem.terminal_grad(terminal_states)
        if b_last.ndim == 2:
            terminal_zref = gx @ b_last
        else:
            terminal_zref = np.einsum("rj,rjk->rk", gx, b_last)

        if problem.constant_diffusion:
            diffusion_all = np.asarray(problem.diffusion(times[0], states[:, 0, :]),
                                       dtype=np.float64)
        else:
            stacks = [np.broadcast_to(problem.diffusion(times[n], states[:, n, :]),
                                      (n_paths, d, d))
                      for n in range(n_steps + 1)]
            diffusion_all = np.concatenate(stacks, axis=0)

        ctx = cls(
            n_steps=n_steps,
            n_paths=n_paths,
            d=d,
            dt=grid.dt,
            inputs=inputs,
            inv_sigma=inv_sigma,
            t_col=t_col,
            x_rows=x_rows,
            dw_rows=dw_rows,
            diffusion_all=diffusion_all,
            terminal_value=problem.terminal(terminal_states)[:, None],
            terminal_zref=terminal_zref,
        )
        if with_malliavin:
            if batch.dx_diag is None or batch.dx_next is None:
                raise ValueError("batch lacks Malliavin derivatives; "
                                 "run malliavin_propagate first")
            ctx.dx_diag_rows = _time_major(batch.dx_diag[:, :n_steps])
            ctx.dx_next_rows = _time_major(batch.dx_next)
            if problem.constant_diffusion:
                binv = np.asarray(problem.diffusion_inverse_at(times[0], states[:, 0, :]),
                                  dtype=np.float64)
            else:
                stacks = [np.broadcast_to(
                    problem.diffusion_inverse_at(times[n + 1], states[:, n + 1, :]),
                    (n_paths, d, d)) for n in range(n_steps)]
                binv = np.concatenate(stacks, axis=0)
            ctx.binv_next_rows = binv
        return ctx

    @property
    def n_rows(self):
        return self.n_steps * self.n_paths


def _per_path_time_sum(tape, squared_rows, ctx):
    """(N*B, 1) squared residuals -> (B,) sums over the grid intervals."""
    stacked = ad.reshape(squared_rows, (ctx.n_steps, ctx.n_paths))
    return ad.sum_(stacked, axis=0)


def y_dynamics_loss(tape, ctx, y_all, z_all, problem):
    """Squared one-step defects of the value process plus terminal mismatch."""
    nb = ctx.n_rows
    y_curr = ad.slice_axis(y_all, 0, 0, nb)
    y_next = ad.slice_axis(y_all, 0, ctx.n_paths, nb + ctx.n_paths)
    z_curr = ad.slice_axis(z_all, 0, 0, nb)

    f = problem.driver(ctx.t_col, ctx.x_rows, y_curr, z_curr)
    if not isinstance(f, ad.Node):
        f = tape.constant(f)
    z_dw = ad.sum_(ad.mul(z_curr, tape.constant(ctx.dw_rows)), axis=1, keepdims=True)
    residual = y_next - y_curr + f * ctx.dt - z_dw

    path_sums = _per_path_time_sum(tape, ad.square(residual), ctx)
    y_term = ad.slice_axis(y_all, 0, nb, nb + ctx.n_paths)
    terminal = ad.square(y_term - tape.constant(ctx.terminal_value))
    terminal = ad.reshape(terminal, (ctx.n_paths,))
    return ad.mean(path_sums + terminal)


def z_dynamics_loss(tape, ctx, y_all, z_all, gamma_all, problem):
    """Squared one-step defects of the Malliavin-derivative dynamics.

    Every residual is a 1 x d row; the Hessian term enters as the
    transposed column (Gamma @ D_n X_n @ dW).
    """
    nb, n_paths, d = ctx.n_rows, ctx.n_paths, ctx.d
    y_curr = ad.slice_axis(y_all, 0, 0, nb)
    z_curr = ad.slice_axis(z_all, 0, 0, nb)
    z_curr3 = ad.reshape(z_curr, (nb, 1, d))
    gamma_curr = ad.slice_axis(gamma_all, 0, 0, nb)

    dx_diag = tape.constant(ctx.dx_diag_rows)
    # D_n Y_{n+1} = Z_{n+1} b^{-1}(t_{n+1}, X_{n+1}) D_n X_{n+1}
    z_next3 = ad.reshape(ad.slice_axis(z_all, 0, n_paths, nb + n_paths), (nb, 1, d))
    dny_next = ad.matmul(ad.matmul(z_next3, tape.constant(ctx.binv_next_rows)),
                         tape.constant(ctx.dx_next_rows))

    # driver derivative along (D_n X_n, Z_n, Gamma_n D_n X_n)
    dnz = ad.matmul(gamma_curr, dx_diag)  # (nb, d, d)
    gx = problem.driver_grad_x(ctx.t_col, ctx.x_rows, y_curr, z_curr)
    if isinstance(gx, ad.Node):
        term_x = ad.matmul(ad.reshape(gx, (nb, 1, d)), dx_diag)
    else:
        term_x = ad.matmul(tape.constant(np.ascontiguousarray(gx).reshape(nb, 1, d)), dx_diag)
    gy = problem.driver_grad_y(ctx.t_col, ctx.x_rows, y_curr, z_curr)
    if not isinstance(gy, ad.Node):
        gy = tape.constant(gy)
    term_y = ad.reshape(ad.mul(gy, z_curr), (nb, 1, d))
    gz = problem.driver_grad_z(ctx.t_col, ctx.x_rows, y_curr, z_curr)
    if not isinstance(gz, ad.Node):
        gz = tape.constant(np.ascontiguousarray(np.broadcast_to(gz, (nb, d))))
    term_z = ad.matmul(ad.reshape(gz, (nb, 1, d)), dnz)
    f_d = term_x + term_y + term_z

    gamma_dw = ad.matmul(dnz, tape.constant(ctx.dw_rows.reshape(nb, d, 1)))
    gamma_dw = ad.reshape(gamma_dw, (nb, 1, d))

    residual = dny_next - z_curr3 + f_d * ctx.dt - gamma_dw
    squared = ad.sum_(ad.square(residual), axis=2)  # (nb, 1)
    path_sums = _per_path_time_sum(tape, squared, ctx)

    z_term = ad.slice_axis(z_all, 0, nb, nb + n_paths)
    term_res = ad.sum_(ad.square(z_term - tape.constant(ctx.terminal_zref)), axis=1)
    return ad.mean(path_sums + term_res)


@dataclass
class LossGraph:
    """A recorded loss with the parameter nodes needed for its gradient."""

    tape: ad.Tape
    loss: ad.Node
    param_nodes: list

    @property
    def value(self):
        return float(self.loss.value)

    def parameter_gradients(self):
        grads = ad.backward(self.tape, self.loss)
        return [grads[node.nid] for node in self.param_nodes]


def _flatten_bound(*bounds):
    out = []
    for bound in bounds:
        for w, b in bound:
            out.append(w)
            out.append(b)
    return out


def ldbsde_loss(params_y, problem, batch, normalizer):
    """Baseline objective: one value network, Z from its input gradient."""
    ctx = LossContext.prepare(problem, batch, normalizer, with_malliavin=False)
    tape = ad.Tape()
    bound = bind_params(tape, params_y)
    y_all, hiddens = mlp_rows(tape, bound, ctx.inputs)
    z_all = z_rows(tape, bound, hiddens, ctx.inv_sigma, ctx.diffusion_all)
    loss = y_dynamics_loss(tape, ctx, y_all, z_all, problem)
    return LossGraph(tape, loss, _flatten_bound(bound))


def dldbsde_loss(networks, problem, batch, normalizer, weight_y, weight_z,
                 tie_gradients=False):
    """Differential objective: weighted value- and gradient-dynamics losses.

    With tie_gradients=True the Z process is read off the value network's
    input gradient instead of the Z network, which together with weights
    (1, 0) reproduces the baseline objective exactly; the gradient-
    dynamics part is only assembled when weight_z is nonzero.
    """
    if not (0.0 <= weight_y <= 1.0 and 0.0 <= weight_z <= 1.0):
        raise ValueError("loss weights must lie in [0, 1]")
    if abs(weight_y + weight_z - 1.0) > 1e-12:
        raise ValueError("loss weights must sum to one")
    if tie_gradients and weight_z != 0.0:
        raise ValueError("tied gradients require weight_z == 0")

    ctx = LossContext.prepare(problem, batch, normalizer,
                              with_malliavin=weight_z != 0.0)
    tape = ad.Tape()
    bound_y = bind_params(tape, networks.y)
    y_all, hiddens = mlp_rows(tape, bound_y, ctx.inputs)
    if tie_gradients:
        z_all = z_rows(tape, bound_y, hiddens, ctx.inv_sigma, ctx.diffusion_all)
        param_nodes = _flatten_bound(bound_y)
    else:
        bound_z = bind_params(tape, networks.z)
        z_all, _ = mlp_rows(tape, bound_z, ctx.inputs)
        param_nodes = _flatten_bound(bound_y, bound_z)

    loss_y = y_dynamics_loss(tape, ctx, y_all, z_all, problem)
    if weight_z == 0.0:
        loss = ad.scale(loss_y, weight_y)
        return LossGraph(tape, loss, param_nodes)

    bound_g = bind_params(tape, networks.gamma)
    gamma_flat, _ = mlp_rows(tape, bound_g, ctx.inputs)
    rows = ctx.inputs.shape[0]
    gamma_all = ad.reshape(gamma_flat, (rows, ctx.d, ctx.d))
    loss_z = z_dynamics_loss(tape, ctx, y_all, z_all, gamma_all, problem)
    loss = ad.scale(loss_y, weight_y) + ad.scale(loss_z, weight_z)
    return LossGraph(tape, loss, param_nodes + _flatten_bound(bound_g))


def default_weights(d):
    """Loss weights proportional to the output dimensions of Y and Z."""
    return 1.0 / (d + 1), d / (d + 1.0)
