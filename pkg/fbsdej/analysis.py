"""Error metrics against exact solutions, rate studies and the loss/error diagnostic."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import integrate, optimize, stats

from fbsdej.deep_solver import OraclePolicy, PathBatch, check_noise, rollout
from fbsdej.exceptions import DivergenceError
from fbsdej.markovian import QuadratureOracle, condexp_quadrature_1d, run_markovian_quadrature
from fbsdej.net import MLPShape, gradcheck
from fbsdej.problem import ProblemSpec, TimeGrid, exact_quantities, nonlocal_operator, pide_residual
from fbsdej.stochastic_kernel import derive_seed, levy_integral, make_noise

logger = logging.getLogger(__name__)

RATE_MODES = ("oracle", "markovian_quadrature")
MODE_ALIASES = {"oracle_policy": "oracle"}
MIN_RATE_LEVELS = 3
MIN_POSTERIOR_POINTS = 5
GRADCHECK_NETS = 100


# ─── Paths ──────────────────────────────────────────────────────────────────

def reference_paths(spec: ProblemSpec, grid: TimeGrid, noise) -> PathBatch:
    """Euler forward path with y = u(t, X) and exact Y, Z, Gamma at every node."""
    if spec.exact_u is None:
        raise ValueError(f"Problem '{spec.name}' has no exact solution")
    check_noise(spec, grid, noise)
    samples, steps = noise.samples, grid.steps
    X = np.empty((samples, steps + 1, spec.d))
    Y = np.empty((samples, steps + 1))
    Z = np.empty((samples, steps, spec.d))
    G = np.empty((samples, steps))
    x = spec.initial_state(samples)
    for n in range(steps):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        value, z, gamma = exact_quantities(spec, t, x)
        X[:, n], Y[:, n], Z[:, n], G[:, n] = x, value, z, gamma
        x = x + spec.forward_increment(t, dt, x, value, noise.dW[:, n], noise.marks[:, n], noise.mask[:, n])
    X[:, steps] = x
    Y[:, steps] = spec.exact_u(grid.terminal_time, x)
    return PathBatch(X=X, Y=Y, Z=Z, Gamma=G, noise=noise, terminal_x=x, terminal_y=Y[:, steps])


def solution_paths(source, spec: ProblemSpec, grid: TimeGrid, noise, **rollout_options) -> PathBatch:
    """Paths of an approximate solution.

    MarkovianState and GridSolution simulate themselves; ParamSets and
    policies go through the deep-solver rollout.
    """
    if hasattr(source, "simulate_paths"):
        return source.simulate_paths(spec, grid, noise)
    return rollout(source, spec, grid, noise, **rollout_options)


# ─── Error functional ───────────────────────────────────────────────────────

ERROR_METRICS = ("x_sup_mse", "y_sup_mse", "z_sum_mse", "gamma_sum_mse")


@dataclass(frozen=True)
class ErrorReport:
    """max_n E|dX|^2, max_n E|dY|^2, sum_n dt E|dZ|^2, sum_n dt E|dGamma|^2 with standard errors."""

    x_sup_mse: float
    y_sup_mse: float
    z_sum_mse: float
    gamma_sum_mse: float
    y0_sq_error: float
    x_stderr: float
    y_stderr: float
    z_stderr: float
    gamma_stderr: float
    samples: int
    h: float

    def __post_init__(self):
        for name in ERROR_METRICS + ("y0_sq_error",):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    @property
    def total(self) -> float:
        return self.x_sup_mse + self.y_sup_mse + self.z_sum_mse + self.gamma_sum_mse

    @property
    def total_stderr(self) -> float:
        return float(np.sqrt(self.x_stderr ** 2 + self.y_stderr ** 2 + self.z_stderr ** 2 + self.gamma_stderr ** 2))

    def to_frame(self) -> pd.DataFrame:
        rows = [(name, getattr(self, name), getattr(self, name.split("_")[0] + "_stderr")) for name in ERROR_METRICS]
        rows += [("y0_sq_error", self.y0_sq_error, np.nan), ("total", self.total, self.total_stderr),
                 ("samples", float(self.samples), np.nan), ("h", self.h, np.nan)]
        return pd.DataFrame(rows, columns=["metric", "value", "stderr"])


def _stderr(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / np.sqrt(values.size))


def _sup_over_nodes(squared: np.ndarray):
    means = squared.mean(axis=0)
    worst = int(np.argmax(means))
    return float(means[worst]), _stderr(squared[:, worst])


def measure_errors(source, spec: ProblemSpec, grid: TimeGrid, samples: int, seed: int = 0, mode: str = "strict",
                   noise=None, **rollout_options) -> ErrorReport:
    """Monte Carlo estimate of the error functional at the grid nodes.

    source is a ParamSet, a policy, a MarkovianState or a GridSolution. The
    reference and the approximation are driven by the same noise.
    """
    if spec.exact_u is None:
        raise ValueError(f"Problem '{spec.name}' has no exact solution to measure errors against")
    if int(samples) < 2:
        raise ValueError(f"Need at least 2 samples for standard errors, got {samples}")
    if noise is None:
        noise = make_noise(grid, spec.d, int(samples), spec.measure, seed, mode=mode)
    reference = reference_paths(spec, grid, noise)
    approx = solution_paths(source, spec, grid, noise, **rollout_options)

    dt = grid.dt[None, :]
    x_sup, x_se = _sup_over_nodes(np.sum((approx.X - reference.X) ** 2, axis=2))
    y_sup, y_se = _sup_over_nodes((approx.Y - reference.Y) ** 2)
    z_path = np.sum(np.sum((approx.Z - reference.Z) ** 2, axis=2) * dt, axis=1)
    gamma_path = np.sum((approx.Gamma - reference.Gamma) ** 2 * dt, axis=1)
    y0_sq = float(np.mean((approx.Y[:, 0] - reference.Y[:, 0]) ** 2))

    metrics = (x_sup, y_sup, float(z_path.mean()), float(gamma_path.mean()), y0_sq)
    if not np.all(np.isfinite(metrics)):
        raise DivergenceError(f"Non-finite error metrics {metrics}")
    return ErrorReport(x_sup_mse=x_sup, y_sup_mse=y_sup, z_sum_mse=metrics[2], gamma_sum_mse=metrics[3],
                       y0_sq_error=y0_sq, x_stderr=x_se, y_stderr=y_se, z_stderr=_stderr(z_path),
                       gamma_stderr=_stderr(gamma_path), samples=noise.samples, h=grid.h)


# ─── Rate study ─────────────────────────────────────────────────────────────

@dataclass
class RateReport:
    """Errors per grid level with the log-log fit log(error) = intercept + slope * log(h).

    degenerate is set when some error is zero and no logarithm exists; the
    fit fields are then NaN.
    """

    levels: pd.DataFrame
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float
    degenerate: bool
    mode: str

    def to_frame(self) -> pd.DataFrame:
        summary = pd.DataFrame({"level": ["slope", "intercept", "r_squared"],
                                "value": [self.slope, self.intercept, self.r_squared],
                                "stderr": [self.slope_stderr, np.nan, np.nan]})
        table = self.levels.assign(level=[f"N={n}" for n in self.levels["N"]])
        return pd.concat([table, summary], ignore_index=True)[["level", "N", "h", "error", "stderr", "value"]]


def fit_rate(h, errors):
    """(slope, intercept, r_squared, slope_stderr, degenerate) of log error against log h."""
    h, errors = np.asarray(h, dtype=float), np.asarray(errors, dtype=float)
    if np.any(errors <= 0):
        return np.nan, np.nan, np.nan, np.nan, True
    fit = stats.linregress(np.log(h), np.log(errors))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2), float(fit.stderr), False


def rate_study(spec: ProblemSpec, N_list, samples: int, mode: str = "oracle", seed: int = 0,
               noise_mode: str = "strict", x_grid=None) -> RateReport:
    """Total squared error per level N and its log-log slope in h.

    oracle: exact Feynman-Kac policies through the Euler rollout.
    markovian_quadrature: the grid backward scheme (d = 1).
    """
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in RATE_MODES:
        raise ValueError(f"Unknown rate mode '{mode}', expected one of {RATE_MODES}")
    levels = sorted({int(n) for n in N_list})
    if len(levels) < MIN_RATE_LEVELS:
        raise ValueError(f"A rate study needs at least {MIN_RATE_LEVELS} distinct N values, got {list(N_list)}")
    if mode == "markovian_quadrature" and spec.d != 1:
        raise ValueError(f"markovian_quadrature mode needs d = 1, problem has d = {spec.d}")

    oracle = QuadratureOracle(spec.measure) if mode == "markovian_quadrature" else None
    rows = []
    for N in levels:
        grid = spec.grid(N)
        if mode == "oracle":
            source = OraclePolicy(spec)
        else:
            source = run_markovian_quadrature(spec, grid, x_grid=x_grid, oracle=oracle)
        report = measure_errors(source, spec, grid, samples, seed=derive_seed(seed, N), mode=noise_mode)
        rows.append((N, grid.h, report.total, report.total_stderr))
        logger.info(f"Level N={N}: total error {report.total:.4e} +/- {report.total_stderr:.1e}")

    table = pd.DataFrame(rows, columns=["N", "h", "error", "stderr"])
    gaps = np.abs(np.diff(table["error"].to_numpy()))
    bars = np.maximum(table["stderr"].to_numpy()[1:], table["stderr"].to_numpy()[:-1])
    if np.any(bars > gaps):
        logger.warning("Monte Carlo error bars exceed the change between some levels; the slope is noisy")

    slope, intercept, r_squared, slope_se, degenerate = fit_rate(table["h"], table["error"])
    if degenerate:
        logger.info("Rate fit is degenerate: some level has zero error")
    else:
        logger.info(f"Fitted slope {slope:.3f} +/- {slope_se:.3f}, R^2 {r_squared:.3f}")
    return RateReport(levels=table, slope=slope, intercept=intercept, r_squared=r_squared, slope_stderr=slope_se,
                      degenerate=degenerate, mode=mode)


# ─── Loss versus error ──────────────────────────────────────────────────────

@dataclass
class PosteriorDiagnostic:
    """Rank agreement of training loss and error, plus error <= a + b * loss with a, b >= 0."""

    spearman: float
    p_value: float
    a: float
    b: float
    degenerate: bool
    points: pd.DataFrame

    def bound(self, loss):
        return self.a + self.b * np.asarray(loss, dtype=float)


def posterior_check(checkpoints) -> PosteriorDiagnostic:
    """checkpoints: (loss, ErrorReport or squared y0 error) pairs from one run at fixed h.

    b comes from a non-negative least-squares fit on [1, loss]; a is then
    raised until the line bounds every point.
    """
    pairs = [(float(loss), float(err.y0_sq_error if isinstance(err, ErrorReport) else err))
             for loss, err in checkpoints]
    if len(pairs) < MIN_POSTERIOR_POINTS:
        raise ValueError(f"Need at least {MIN_POSTERIOR_POINTS} checkpoints, got {len(pairs)}")
    points = pd.DataFrame(pairs, columns=["loss", "error"])
    loss, error = points["loss"].to_numpy(), points["error"].to_numpy()
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(error))):
        raise ValueError("Checkpoint losses and errors must be finite")

    degenerate = bool(np.ptp(loss) == 0 or np.ptp(error) == 0)
    if degenerate:
        rho, p_value = np.nan, np.nan
    else:
        rho, p_value = stats.spearmanr(loss, error)

    (a, b), _ = optimize.nnls(np.column_stack([np.ones_like(loss), loss]), error)
    a += max(0.0, float(np.max(error - (a + b * loss))))
    return PosteriorDiagnostic(spearman=float(rho), p_value=float(p_value), a=float(a), b=float(b),
                               degenerate=degenerate, points=points)


# ─── Self-checks ────────────────────────────────────────────────────────────

def _check(rows, name, value, tolerance):
    value = float(value)
    rows.append((name, value, float(tolerance), bool(np.isfinite(value) and value <= tolerance)))


def gradcheck_shapes(seed: int = 0, count: int = GRADCHECK_NETS) -> list:
    """Random small tanh shapes for the tape-versus-finite-difference check."""
    rng = np.random.default_rng(derive_seed(seed, 11))
    shapes = []
    for _ in range(int(count)):
        hidden = tuple(int(w) for w in rng.integers(2, 7, size=rng.integers(1, 3)))
        shapes.append(MLPShape(int(rng.integers(1, 5)), hidden, int(rng.integers(1, 4)), "tanh"))
    return shapes


def _measure_reference(measure, g) -> float:
    value, _ = integrate.quad(lambda e: g(e) * measure.total_intensity * float(measure.density(np.asarray(e))),
                              -measure.delta, measure.delta, epsabs=1e-14, epsrel=1e-13, limit=200)
    return value


def self_checks(spec: ProblemSpec, seed: int = 0, fd_step: float = 1e-4) -> pd.DataFrame:
    """Built-in oracles for a problem: (check, value, tolerance, passed) rows."""
    rows = []
    measure = spec.measure
    T = spec.terminal_time

    def polynomial(e):
        return 1.0 + e ** 3 + e ** 6

    reference = _measure_reference(measure, polynomial)
    _check(rows, "levy_integral_polynomial", abs(levy_integral(polynomial, measure) - reference),
           1e-12 * max(1.0, abs(reference)))

    if spec.exact_u is not None:
        direction = np.ones(spec.d) / spec.d
        points = spec.xi[None, :] + np.linspace(-1.0, 1.0, 5)[:, None] * direction[None, :]
        t = 0.5 * T
        quadrature = nonlocal_operator(spec, t, points, spec.exact_u)
        gaps = []
        for point, value in zip(points, quadrature):
            x = point[None, :]
            y = spec.exact_u(t, x)

            def jump_gain(e, x=x, y=y):
                shifted = x + spec.beta(t, x, y, np.array([e]))
                return float((spec.exact_u(t, shifted) - y)[0]) * float(measure.gamma(np.asarray(e)))

            gaps.append(abs(value - _measure_reference(measure, jump_gain)))
        _check(rows, "gamma_oracle", max(gaps), 1e-8)

        residuals = [abs(pide_residual(spec, t_i, spec.xi + s * direction, spec.exact_u, fd_step=fd_step))
                     for t_i in np.linspace(0.0, T, 12)[1:-1] for s in np.linspace(-1.0, 1.0, 10)]
        _check(rows, "pide_residual_max", max(residuals), 1e-4)

    _check(rows, "gradient_check", max(gradcheck(shape, seed=derive_seed(seed, k))
                                       for k, shape in enumerate(gradcheck_shapes(seed))), 1e-5)

    grid = TimeGrid.uniform(T, 20)
    noise = make_noise(grid, 1, 50_000, measure, derive_seed(seed, 7), mode="fast")
    rate = measure.total_intensity * grid.dt[0]
    counts = noise.counts.ravel().astype(float)
    draws = counts.size
    _check(rows, "poisson_mean_zscore", abs(counts.mean() - rate) / np.sqrt(rate / draws), 3.0)
    _check(rows, "poisson_var_zscore", abs(counts.var(ddof=1) - rate) / np.sqrt((rate + 2.0 * rate ** 2) / draws),
           3.0)
    marks = noise.marks[noise.mask]
    if marks.size > 1:
        mean = float(measure.mark_probabilities @ measure.nodes)
        spread = float(measure.mark_probabilities @ (measure.nodes - mean) ** 2)
        _check(rows, "mark_mean_zscore", abs(marks.mean() - mean) / np.sqrt(spread / marks.size), 3.0)

    if spec.d == 1:
        _check(rows, "quadrature_tower", tower_gap(spec, T / 20), 1e-8)

    table = pd.DataFrame(rows, columns=["check", "value", "tolerance", "passed"])
    for row in table.itertuples():
        logger.log(logging.INFO if row.passed else logging.WARNING,
                   f"{row.check}: {row.value:.3e} (tolerance {row.tolerance:.1e}) {'ok' if row.passed else 'FAILED'}")
    return table


def tower_gap(spec: ProblemSpec, dt: float, points: Optional[np.ndarray] = None) -> float:
    """max |E_dt[E_dt[phi]] - E_2dt[phi]| for phi = sin + 2, coefficients frozen at t = 0, y = 0."""
    oracle = QuadratureOracle(spec.measure)
    points = spec.xi[0] + np.linspace(-1.0, 1.0, 3) if points is None else np.asarray(points, dtype=float)

    def phi(x):
        return np.sin(x) + 2.0

    def inner(x):
        return condexp_quadrature_1d(spec, phi, x, dt, oracle=oracle)

    two_steps = condexp_quadrature_1d(spec, inner, points, dt, oracle=oracle)
    one_shot = condexp_quadrature_1d(spec, phi, points, 2.0 * dt, oracle=oracle)
    return float(np.max(np.abs(two_steps - one_shot)))
