"""Deep FBSDE scheme: policy rollout, terminal loss and the training loop.

A policy supplies y0, the Z-process and the U-kernel at every step. Trained
networks (NetworkPolicy) and the exact Feynman-Kac policies of a problem with
a known solution (OraclePolicy) run through the same Euler rollout.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from fbsdej import tape as ops
from fbsdej.exceptions import DivergenceError
from fbsdej.net import (AdamState, BoundParams, NetworkConfig, ParamSet, adam_step, grad, init_params,
                        mlp_forward, mlp_forward_marks)
from fbsdej.problem import ProblemSpec, TimeGrid, build_problem, exact_gradient
from fbsdej.stochastic_kernel import NOISE_MODES, JumpMeasureSpec, NoiseBlock, derive_seed, make_noise

logger = logging.getLogger(__name__)

DRIVER_MODES = ("explicit", "implicit")
Y0_INITS = ("terminal", "zero")
OPTIMIZERS = ("adam", "sgd")
CHECKPOINT_COLUMNS = ["iteration", "loss_mean", "y0_mean", "y0_std", "wall_seconds"]


# ─── Policies ───────────────────────────────────────────────────────────────

class NetworkPolicy:
    """y0, Z and U from a ParamSet, optionally bound to a tape."""

    def __init__(self, params):
        if not isinstance(params, (ParamSet, BoundParams)):
            raise TypeError(f"NetworkPolicy needs a ParamSet, got {type(params).__name__}")
        self.params = params

    def initial_value(self, samples: int):
        return ops.broadcast_to(self.params.y0, (samples,))

    def _features(self, t, x, y):
        rows = np.shape(ops.value_of(x))[0]
        parts = [x, ops.reshape(y, (rows, 1))]
        if self.params.time_input:
            parts.insert(0, np.full((rows, 1), float(t)))
        return ops.concat(parts, axis=1)

    def z(self, n, t, x, y):
        return mlp_forward(self.params.z_layers(n), self._features(t, x, y), self.params.activation)

    def kernel(self, n, t, x, y, marks):
        return mlp_forward_marks(self.params.u_layers(n), self._features(t, x, y), marks, self.params.activation)


class OraclePolicy:
    """Exact policies: y0 = u(0, xi), Z = sigma^T grad u, U(e) = u(t, x + beta(e)) - u(t, x)."""

    def __init__(self, spec: ProblemSpec):
        if spec.exact_u is None:
            raise ValueError(f"Problem '{spec.name}' has no exact solution for oracle policies")
        self.spec = spec

    def initial_value(self, samples: int):
        return np.full(samples, float(self.spec.exact_u(0.0, self.spec.xi[None, :])[0]))

    def z(self, n, t, x, y):
        x, y = ops.value_of(x), ops.value_of(y)
        sig = np.asarray(self.spec.sigma(t, x, y), dtype=float)
        return np.einsum("mij,mi->mj", sig, exact_gradient(self.spec, t, x))

    def kernel(self, n, t, x, y, marks):
        x, y = ops.value_of(x), ops.value_of(y)
        base = self.spec.exact_u(t, x)
        columns = [self.spec.exact_u(t, x + self.spec.beta(t, x, y, marks[:, j])) - base
                   for j in range(marks.shape[1])]
        return np.stack(columns, axis=1) if columns else np.zeros((x.shape[0], 0))


def as_policy(source, tape: Optional[ops.Tape] = None):
    if isinstance(source, ParamSet):
        return NetworkPolicy(source.bind(tape) if tape is not None else source)
    if isinstance(source, BoundParams):
        return NetworkPolicy(source)
    if all(hasattr(source, name) for name in ("initial_value", "z", "kernel")):
        return source
    raise TypeError(f"Cannot build a policy from {type(source).__name__}")


# ─── Rollout ────────────────────────────────────────────────────────────────

@dataclass
class PathBatch:
    """Simulated trajectories on a grid.

    X [M, N+1, d], Y [M, N+1], Z [M, N, d], Gamma [M, N] hold values.
    terminal_x / terminal_y keep the final state as tape tensors when the
    rollout was recorded. `policy.kernel(n, t, x, y, marks)` evaluates U.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    Gamma: np.ndarray
    noise: NoiseBlock
    policy: object = None
    terminal_x: object = None
    terminal_y: object = None

    @property
    def samples(self) -> int:
        return self.X.shape[0]

    @property
    def y0(self) -> float:
        return float(self.Y[0, 0])


def gamma_of(u_net, t_n, x, y, measure: JumpMeasureSpec, activation="relu", time_input=False):
    """Gamma = sum_k w_k gamma(e_k) U(x, y, e_k) over the measure's quadrature nodes.

    u_net is the (W, b) layer list of a U-kernel network, or a callable
    kernel(x, y, marks) returning [M, Q] for marks [M, Q].
    """
    rows = np.shape(ops.value_of(x))[0]
    marks = np.broadcast_to(measure.nodes, (rows, measure.nodes.size))
    if callable(u_net):
        values = u_net(x, y, marks)
    else:
        parts = [x, ops.reshape(y, (rows, 1))]
        if time_input:
            parts.insert(0, np.full((rows, 1), float(t_n)))
        values = mlp_forward_marks(u_net, ops.concat(parts, axis=1), marks, activation)
    result = ops.matmul(values, measure.gamma_weights)
    if not np.all(np.isfinite(ops.value_of(result))):
        raise DivergenceError(f"Non-finite kernel values at t={t_n}")
    return result


def check_noise(spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock):
    if noise.steps != grid.steps or noise.dim != spec.d:
        raise ValueError(f"Noise block is [{noise.samples}, {noise.steps}, {noise.dim}], "
                         f"grid has {grid.steps} steps and the problem d={spec.d}")
    if not np.allclose(noise.grid.nodes, grid.nodes):
        raise ValueError("Noise block was generated on a different time grid")


def rollout(source, spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock, tape: Optional[ops.Tape] = None,
            driver_mode: str = "explicit", implicit_iterations: int = 5) -> PathBatch:
    """Forward-backward Euler recursion under a policy.

    Y_{n+1} = Y_n - f(t_n, X_n, Y_n, Z_n, Gamma_n) dt + Z_n dW
              + sum_k U(e_k) - dt * integral of U against lambda.
    In implicit mode f reads Y_{n+1}, found by `implicit_iterations`
    fixed-point sweeps that stay on the tape.
    """
    if driver_mode not in DRIVER_MODES:
        raise ValueError(f"Unknown driver mode '{driver_mode}', expected one of {DRIVER_MODES}")
    check_noise(spec, grid, noise)
    policy = as_policy(source, tape)
    measure = spec.measure
    samples, steps, d = noise.samples, grid.steps, spec.d
    quad = measure.nodes.size
    quad_marks = np.broadcast_to(measure.nodes, (samples, quad))

    X = np.empty((samples, steps + 1, d))
    Y = np.empty((samples, steps + 1))
    Z = np.empty((samples, steps, d))
    G = np.empty((samples, steps))

    x = spec.initial_state(samples)
    y = policy.initial_value(samples)
    X[:, 0], Y[:, 0] = x, ops.value_of(y)

    for n in range(steps):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        dw = noise.dW[:, n, :]
        marks, mask = noise.marks[:, n, :], noise.mask[:, n, :]

        z = policy.z(n, t, x, y)
        values = policy.kernel(n, t, x, y, np.concatenate([quad_marks, marks], axis=1))
        at_nodes = ops.getitem(values, (slice(None), slice(0, quad)))
        at_jumps = ops.getitem(values, (slice(None), slice(quad, None)))
        gamma = ops.matmul(at_nodes, measure.gamma_weights)
        compensator = ops.matmul(at_nodes, measure.lambda_weights)

        martingale = ops.sum(z * dw, axis=1) + ops.sum(at_jumps * mask, axis=1) - dt * compensator
        x_next = x + spec.forward_increment(t, dt, x, y, dw, marks, mask)
        y_next = y - spec.driver_f(t, x, y, z, gamma) * dt + martingale
        if driver_mode == "implicit":
            for _ in range(int(implicit_iterations)):
                y_next = y + martingale - spec.driver_f(t, x, y_next, z, gamma) * dt

        X[:, n + 1], Y[:, n + 1] = ops.value_of(x_next), ops.value_of(y_next)
        Z[:, n], G[:, n] = ops.value_of(z), ops.value_of(gamma)
        if not (np.all(np.isfinite(X[:, n + 1])) and np.all(np.isfinite(Y[:, n + 1]))
                and np.all(np.isfinite(Z[:, n])) and np.all(np.isfinite(G[:, n]))):
            raise DivergenceError(f"Non-finite state after step {n}", step=n)
        x, y = x_next, y_next

    return PathBatch(X=X, Y=Y, Z=Z, Gamma=G, noise=noise, policy=policy, terminal_x=x, terminal_y=y)


def terminal_loss(source, spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock, tape: Optional[ops.Tape] = None,
                  **rollout_options):
    """Mean of (Y_N - g(X_N))^2; a tape tensor when `tape` is given, else a float."""
    paths = rollout(source, spec, grid, noise, tape=tape, **rollout_options)
    mismatch = paths.terminal_y - spec.terminal_g(paths.terminal_x)
    loss = ops.mean(ops.square(mismatch))
    return loss if tape is not None else float(loss)


# ─── Training ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainConfig:
    problem: str = "example1"
    d: Optional[int] = None
    T: float = 1.0
    delta: float = 1.0
    mark_mode: str = "aggregate"
    N: int = 20
    batch_size: int = 256
    iterations: int = 4000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    lr_decay: float = 1.0
    lr_decay_every: int = 1000
    seed: int = 0
    checkpoint_every: int = 100
    runs: int = 1
    hidden: Optional[tuple] = None
    activation: str = "relu"
    network_mode: str = "per_step"
    y0_init: str = "terminal"
    driver_mode: str = "explicit"
    implicit_iterations: int = 5
    eval_samples: int = 256
    quad_order: int = 32
    noise_mode: str = "strict"

    def __post_init__(self):
        if self.N < 1 or self.iterations < 0 or self.runs < 1 or self.checkpoint_every < 1:
            raise ValueError("N, runs and checkpoint_every must be positive and iterations non-negative")
        if self.batch_size < 2 or self.eval_samples < 2:
            raise ValueError(f"batch_size and eval_samples must be at least 2, got {self.batch_size}, "
                             f"{self.eval_samples}")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("Learning rate must be positive and lr_decay in (0, 1]")
        for value, allowed, label in ((self.optimizer, OPTIMIZERS, "optimizer"),
                                      (self.y0_init, Y0_INITS, "y0_init"),
                                      (self.driver_mode, DRIVER_MODES, "driver_mode"),
                                      (self.noise_mode, NOISE_MODES, "noise_mode")):
            if value not in allowed:
                raise ValueError(f"Unknown {label} '{value}', expected one of {allowed}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(hidden_dims=self.hidden, activation=self.activation, network_mode=self.network_mode)

    def build_problem(self) -> ProblemSpec:
        return build_problem(self.problem, d=self.d, terminal_time=self.T, delta=self.delta,
                             quad_order=self.quad_order, mark_mode=self.mark_mode)

    def learning_rate(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.lr_decay_every)


@dataclass
class TrainReport:
    """Checkpoint table aggregated over runs plus the per-run detail."""

    checkpoints: pd.DataFrame
    per_run: pd.DataFrame
    training_loss: np.ndarray
    params: list = field(default_factory=list)
    exact_value: Optional[float] = None

    @property
    def final(self) -> pd.Series:
        return self.checkpoints.iloc[-1]

    def smoothed_loss(self, window: int = 100) -> np.ndarray:
        """Run-averaged training loss under a trailing moving average."""
        if self.training_loss.size == 0:
            return np.empty(0)
        series = pd.Series(self.training_loss.mean(axis=0))
        return series.rolling(window, min_periods=1).mean().to_numpy()


def _summarise(per_run: pd.DataFrame, exact_value: Optional[float]) -> pd.DataFrame:
    grouped = per_run.groupby("iteration", sort=True)
    table = pd.DataFrame({
        "iteration": grouped["iteration"].first().astype(int),
        "loss_mean": grouped["loss"].mean(),
        "y0_mean": grouped["y0"].mean(),
        "y0_std": grouped["y0"].std(ddof=1).fillna(0.0),
        "wall_seconds": grouped["wall_seconds"].mean(),
    }).reset_index(drop=True)
    if exact_value is not None:
        errors = (per_run["y0"] - exact_value).abs() / abs(exact_value)
        table["y0_rel_l1"] = errors.groupby(per_run["iteration"]).mean().to_numpy()
    return table


def _report(rows, losses, params, exact_value) -> TrainReport:
    per_run = pd.DataFrame(rows, columns=["run", "iteration", "loss", "y0", "wall_seconds"])
    width = max((len(history) for history in losses), default=0)
    training = np.full((len(losses), width), np.nan)
    for r, history in enumerate(losses):
        training[r, :len(history)] = history
    return TrainReport(checkpoints=_summarise(per_run, exact_value), per_run=per_run, training_loss=training,
                       params=params, exact_value=exact_value)


def train(config: TrainConfig, spec: Optional[ProblemSpec] = None) -> TrainReport:
    """Minimise the terminal loss with a fresh noise minibatch every iteration.

    Checkpoints (every `checkpoint_every` iterations and at the end) evaluate
    the loss on a fixed block of `eval_samples` paths per run.
    """
    spec = spec if spec is not None else config.build_problem()
    grid = spec.grid(config.N)
    exact_value = float(spec.exact_u(0.0, spec.xi[None, :])[0]) if spec.exact_u is not None else None
    rollout_options = {"driver_mode": config.driver_mode, "implicit_iterations": config.implicit_iterations}
    y0_start = float(spec.terminal_g(spec.xi[None, :])[0]) if config.y0_init == "terminal" else 0.0

    rows, losses, finals = [], [], []
    for run in range(config.runs):
        params = init_params(config.network_config(), spec.d, config.N, derive_seed(config.seed, run), y0=y0_start)
        state = AdamState.zeros(params.size)
        eval_noise = make_noise(grid, spec.d, config.eval_samples, spec.measure, derive_seed(config.seed, run, 0),
                                mode=config.noise_mode)
        history = []
        losses.append(history)
        started = time.perf_counter()
        logger.info(f"Run {run + 1}/{config.runs}: {spec.name} d={spec.d} N={config.N} "
                    f"{params.size} parameters, {config.iterations} iterations")

        for iteration in range(config.iterations + 1):
            try:
                if iteration % config.checkpoint_every == 0 or iteration == config.iterations:
                    loss = terminal_loss(params, spec, grid, eval_noise, **rollout_options)
                    rows.append((run, iteration, loss, params.y0, time.perf_counter() - started))
                    logger.info(f"run {run} iteration {iteration}: loss {loss:.5f}, y0 {params.y0:.5f}")
                if iteration == config.iterations:
                    break
                noise = make_noise(grid, spec.d, config.batch_size, spec.measure,
                                   derive_seed(config.seed, run, iteration + 1), mode=config.noise_mode)
                tape = ops.Tape()
                loss_node = terminal_loss(params, spec, grid, noise, tape=tape, **rollout_options)
                gradient = grad(loss_node, tape)
                params, state = adam_step(params, gradient, state, lr=config.learning_rate(iteration),
                                          beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                                          sgd=config.optimizer == "sgd")
                history.append(float(loss_node.value))
            except DivergenceError as error:
                logger.error(f"Run {run} diverged at iteration {iteration}: {error}")
                raise DivergenceError(f"Training diverged at iteration {iteration} of run {run}: {error}",
                                      step=error.step, node_kind=error.node_kind,
                                      report=_report(rows, losses, finals + [params], exact_value)) from error
        finals.append(params)

    return _report(rows, losses, finals, exact_value)
