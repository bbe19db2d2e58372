"""FBSDEJ / PIDE instances as coefficient bundles, plus the benchmark problems.

Coefficient callables are batched over sample paths:

    b(t, x, y)           x [M, d], y [M]  ->  [M, d]
    sigma(t, x, y)                        ->  [M, d, d]
    beta(t, x, y, e)     e [M]            ->  [M, d]
    driver_f(t, x, y, z, gamma)           ->  [M]        z [M, d], gamma [M]
    terminal_g(x)                         ->  [M]
    exact_u(t, x)                         ->  [M]

They are written with the functions of fbsdej.tape, so y, z and gamma may be
tape tensors during training.
"""
import inspect
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from fbsdej import tape as ops
from fbsdej.exceptions import DivergenceError
from fbsdej.stochastic_kernel import JumpMeasureSpec, compensator_drift, levy_integral

logger = logging.getLogger(__name__)

MARK_MODES = ("aggregate", "per_coordinate")
TERMINAL_TOLERANCE = 1e-10


# ─── Time grid ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("A time grid needs at least one step")
        if nodes[0] != 0.0:
            raise ValueError(f"Time grid must start at 0, got {nodes[0]}")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("Time grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, terminal_time: float, steps: int) -> "TimeGrid":
        if int(steps) < 1:
            raise ValueError(f"Number of steps must be at least 1, got {steps}")
        if not terminal_time > 0:
            raise ValueError(f"Terminal time must be positive, got {terminal_time}")
        return cls(np.linspace(0.0, float(terminal_time), int(steps) + 1))

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def h(self) -> float:
        return float(np.max(self.dt))

    @property
    def terminal_time(self) -> float:
        return float(self.nodes[-1])


# ─── Problem bundle ─────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One FBSDEJ: forward coefficients, driver, terminal condition, jump measure.

    `coupled` marks problems whose forward coefficients read y. `exact_grad`
    is an optional closed form of grad_x u used for exact Z; without it a
    central difference of exact_u is taken.
    """

    name: str
    d: int
    terminal_time: float
    xi: np.ndarray
    b: Callable
    sigma: Callable
    beta: Callable
    driver_f: Callable
    terminal_g: Callable
    measure: JumpMeasureSpec
    exact_u: Optional[Callable] = None
    exact_grad: Optional[Callable] = None
    coupled: bool = False

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError(f"Dimension must be at least 1, got {self.d}")
        if not self.terminal_time > 0:
            raise ValueError(f"Terminal time must be positive, got {self.terminal_time}")
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        if xi.shape != (int(self.d),):
            raise ValueError(f"Initial state has shape {xi.shape}, expected ({self.d},)")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "d", int(self.d))
        if self.exact_u is not None:
            points = np.random.default_rng(0).normal(size=(16, self.d))
            gap = np.max(np.abs(self.exact_u(self.terminal_time, points) - self.terminal_g(points)))
            if not gap <= TERMINAL_TOLERANCE:
                raise ValueError(f"exact_u(T, x) differs from terminal_g(x) by {gap} for problem '{self.name}'")

    def grid(self, steps: int) -> TimeGrid:
        return TimeGrid.uniform(self.terminal_time, steps)

    def initial_state(self, samples: int) -> np.ndarray:
        return np.broadcast_to(self.xi, (samples, self.d)).copy()

    def forward_increment(self, t, dt, x, y, dw, marks, mask):
        """Euler increment of X over one interval.

        b dt + sigma dW + sum_k beta(e_k) - dt * integral of beta against lambda.
        marks and mask are [M, K] for the interval.
        """
        rows = np.shape(ops.value_of(x))[0]
        increment = self.b(t, x, y) * dt + ops.bmv(self.sigma(t, x, y), dw)
        for k in range(np.shape(marks)[1]):
            increment = increment + mask[:, k, None] * self.beta(t, x, y, marks[:, k])
        drift = compensator_drift(lambda e: self.beta(t, x, y, np.full(rows, e)), self.measure)
        return increment - dt * drift


# ─── Exact quantities ───────────────────────────────────────────────────────

def exact_gradient(spec: ProblemSpec, t: float, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """grad_x u at a batch of points [M, d]."""
    if spec.exact_u is None:
        raise ValueError(f"Problem '{spec.name}' has no exact solution")
    if spec.exact_grad is not None:
        return np.asarray(spec.exact_grad(t, x), dtype=float)
    columns = []
    for i in range(spec.d):
        shift = np.zeros(spec.d)
        shift[i] = step
        columns.append((spec.exact_u(t, x + shift) - spec.exact_u(t, x - shift)) / (2.0 * step))
    return np.stack(columns, axis=1)


def nonlocal_operator(spec: ProblemSpec, t: float, x: np.ndarray, u: Callable, y=None) -> np.ndarray:
    """B[u](t, x) = integral of (u(t, x + beta) - u(t, x)) gamma(e) lambda(de), batched over x."""
    x = np.asarray(x, dtype=float)
    base = u(t, x)
    y = base if y is None else y
    rows = x.shape[0]
    total = np.zeros(rows)
    for e, w in zip(spec.measure.nodes, spec.measure.gamma_weights):
        total += w * (u(t, x + spec.beta(t, x, y, np.full(rows, e))) - base)
    return total


def exact_quantities(spec: ProblemSpec, t: float, x: np.ndarray):
    """(u, sigma^T grad u, B[u]) of the exact solution at a batch of points."""
    if spec.exact_u is None:
        raise ValueError(f"Problem '{spec.name}' has no exact solution")
    x = np.asarray(x, dtype=float)
    value = spec.exact_u(t, x)
    gradient = exact_gradient(spec, t, x)
    sig = np.asarray(spec.sigma(t, x, value), dtype=float)
    z = np.einsum("mij,mi->mj", sig, gradient)
    return value, z, nonlocal_operator(spec, t, x, spec.exact_u, y=value)


def pide_residual(spec: ProblemSpec, t: float, x, u: Callable, fd_step: float = 1e-4) -> float:
    """d_t u + L u + f(t, x, u, sigma^T grad u, B[u]) at one point.

    Derivatives by central differences of step fd_step, the nonlocal parts by
    the measure's quadrature.
    """
    if not 0.0 < t < spec.terminal_time:
        raise ValueError(f"Residual needs 0 < t < T, got t={t}")
    d, h = spec.d, float(fd_step)
    point = np.asarray(x, dtype=float).reshape(1, d)

    u0 = float(u(t, point)[0])
    u_t = float(u(t + h, point)[0] - u(t - h, point)[0]) / (2.0 * h)
    shifts = h * np.eye(d)
    plus, minus = u(t, point + shifts), u(t, point - shifts)
    gradient = (plus - minus) / (2.0 * h)

    y = np.array([u0])
    sig = np.asarray(spec.sigma(t, point, y), dtype=float)[0]
    drift = np.asarray(spec.b(t, point, y), dtype=float)[0]
    diffusion = sig @ sig.T

    trace = float(np.sum(np.diag(diffusion) * (plus - 2.0 * u0 + minus) / h ** 2))
    rows, cols = np.nonzero(np.triu(diffusion, k=1))
    if rows.size:
        e_i, e_j = shifts[rows], shifts[cols]
        mixed = (u(t, point + e_i + e_j) - u(t, point + e_i - e_j)
                 - u(t, point - e_i + e_j) + u(t, point - e_i - e_j)) / (4.0 * h ** 2)
        trace += float(2.0 * np.sum(diffusion[rows, cols] * mixed))

    def jump(e):
        return np.asarray(spec.beta(t, point, y, np.array([e])), dtype=float)[0]

    generator_jumps = levy_integral(lambda e: u(t, point + jump(e))[0] - u0 - gradient @ jump(e), spec.measure)
    gamma = levy_integral(lambda e: (u(t, point + jump(e))[0] - u0) * spec.measure.gamma(e), spec.measure)
    z = (sig.T @ gradient)[None, :]

    driver = float(spec.driver_f(t, point, y, z, np.array([gamma]))[0])
    residual = u_t + 0.5 * trace + float(drift @ gradient) + generator_jumps + driver
    if not np.isfinite(residual):
        raise DivergenceError(f"Non-finite PIDE residual at t={t}, x={point[0]}")
    return residual


# ─── Benchmark problems ─────────────────────────────────────────────────────

def _sine_problem(name, d, terminal_time, delta, quad_order, mark_mode="aggregate", coupling=0.0):
    """u(t, x) = sin(sum x + t) + 2 with sigma = I/sqrt(d) and uniform marks."""
    if int(d) < 1:
        raise ValueError(f"Dimension must be at least 1, got {d}")
    if mark_mode not in MARK_MODES:
        raise ValueError(f"Unknown mark mode '{mark_mode}', expected one of {MARK_MODES}")
    d = int(d)
    root_d = np.sqrt(d)
    volatility = np.eye(d) / root_d
    measure = JumpMeasureSpec.uniform(delta, quad_order=quad_order)
    per_unit = 1.0 / d if mark_mode == "aggregate" else 1.0

    def b(t, x, y):
        if coupling:
            return coupling * ops.reshape(y, (-1, 1)) * np.ones((1, d))
        return np.zeros(np.shape(ops.value_of(x)))

    def sigma(t, x, y):
        return np.broadcast_to(volatility, (np.shape(ops.value_of(x))[0], d, d))

    def beta(t, x, y, e):
        e = np.asarray(e, dtype=float)
        return np.broadcast_to((per_unit * e)[:, None], (e.shape[0], d))

    def driver_f(t, x, y, z, gamma):
        s = ops.sin(ops.sum(x, axis=1) + t) + 2.0
        z_mean = ops.sum(z, axis=1) / root_d
        value = (y - 2.0) * ops.exp(y - s) / 2.0 - y * z_mean / s - gamma
        if coupling:
            value = value - coupling * y * z_mean * root_d
        return value

    def terminal_g(x):
        return ops.sin(ops.sum(x, axis=1) + terminal_time) + 2.0

    def exact_u(t, x):
        return np.sin(np.sum(x, axis=1) + t) + 2.0

    def exact_grad(t, x):
        return np.cos(np.sum(x, axis=1) + t)[:, None] * np.ones((1, d))

    consistent = mark_mode == "aggregate"
    return ProblemSpec(
        name=name,
        d=d,
        terminal_time=float(terminal_time),
        xi=np.zeros(d),
        b=b,
        sigma=sigma,
        beta=beta,
        driver_f=driver_f,
        terminal_g=terminal_g,
        measure=measure,
        exact_u=exact_u if consistent else None,
        exact_grad=exact_grad if consistent else None,
        coupled=bool(coupling),
    )


def example_1d(terminal_time=1.0, delta=1.0, quad_order=32) -> ProblemSpec:
    """d = 1, b = 0, sigma = 1, beta(e) = e, exact solution sin(x + t) + 2."""
    return _sine_problem("example1", 1, terminal_time, delta, quad_order)


def example_highdim(d=100, terminal_time=1.0, delta=1.0, quad_order=32, mark_mode="aggregate") -> ProblemSpec:
    """sin(xbar + t) + 2 in d dimensions, xbar the coordinate sum.

    aggregate: beta(e) = (e/d) * 1, so xbar jumps by e and the closed-form
    solution holds. per_coordinate: beta(e) = e * 1 on every coordinate; no
    exact solution is attached.
    """
    return _sine_problem("example_highdim", d, terminal_time, delta, quad_order, mark_mode=mark_mode)


def example_coupled_1d(coupling=0.05, terminal_time=1.0, delta=1.0, quad_order=32) -> ProblemSpec:
    """example_1d with drift b = coupling * y.

    The driver carries -coupling * y * z so sin(x + t) + 2 still solves the PIDE.
    """
    return _sine_problem("example_coupled", 1, terminal_time, delta, quad_order, coupling=float(coupling))


def constant_problem(d=1, value=2.0, terminal_time=1.0, delta=1.0, quad_order=32) -> ProblemSpec:
    """All coefficients zero, u = value. Every discretisation error vanishes."""
    d = int(d)

    def zeros(t, x, y, *rest):
        return np.zeros(np.shape(ops.value_of(x)))

    def no_jump(t, x, y, e):
        return np.zeros((np.shape(e)[0], d))

    def sigma(t, x, y):
        return np.zeros((np.shape(ops.value_of(x))[0], d, d))

    def driver_f(t, x, y, z, gamma):
        return 0.0 * y

    def constant(*args):
        x = args[-1]
        return np.full(np.shape(ops.value_of(x))[0], float(value))

    return ProblemSpec(
        name="constant",
        d=d,
        terminal_time=float(terminal_time),
        xi=np.zeros(d),
        b=zeros,
        sigma=sigma,
        beta=no_jump,
        driver_f=driver_f,
        terminal_g=constant,
        measure=JumpMeasureSpec.uniform(delta, quad_order=quad_order),
        exact_u=constant,
        exact_grad=lambda t, x: np.zeros(np.shape(x)),
    )


PROBLEMS = {
    "example1": example_1d,
    "example_highdim": example_highdim,
    "example_coupled": example_coupled_1d,
    "constant": constant_problem,
}


def get_problem(name: str, **overrides) -> ProblemSpec:
    """Build a registered problem; None-valued overrides are ignored."""
    if name not in PROBLEMS:
        raise ValueError(f"Unknown problem '{name}', expected one of {sorted(PROBLEMS)}")
    builder = PROBLEMS[name]
    accepted = inspect.signature(builder).parameters
    kwargs = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in accepted:
            if key == "d" and int(value) == 1:
                continue
            raise ValueError(f"Problem '{name}' does not take a '{key}' setting")
        kwargs[key] = value
    return builder(**kwargs)


def build_problem(name: str, d=None, terminal_time=1.0, delta=1.0, quad_order=32,
                  mark_mode="aggregate") -> ProblemSpec:
    """get_problem for run settings: mark_mode only reaches problems that take it."""
    overrides = {"d": d, "terminal_time": terminal_time, "delta": delta, "quad_order": quad_order}
    if name in PROBLEMS and "mark_mode" in inspect.signature(PROBLEMS[name]).parameters:
        overrides["mark_mode"] = mark_mode
    elif mark_mode != "aggregate":
        raise ValueError(f"Problem '{name}' has no mark mode setting")
    return get_problem(name, **overrides)
