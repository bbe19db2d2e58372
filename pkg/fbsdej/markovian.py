"""Markovian iteration for the discrete FBSDEJ system.

Each sweep simulates X forward with the previous sweep's value function in the
coefficients, then runs the backward conditional-expectation recursion:

    Z_n     = E_n[Y_{n+1} dW_n] / dt
    Gamma_n = E_n[Y_{n+1} M_gamma] / dt
    Y_n     = E_n[Y_{n+1} + f(t_n, X_n, Y_{n+1}, Z_n, Gamma_n) dt]

Conditional expectations are least-squares regressions on simulated paths (any
d) or, in one dimension, a deterministic quadrature over the Gaussian increment
and the compound Poisson jump sum.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement
from math import comb
from typing import Callable, Optional

import numpy as np
import pandas as pd
from numpy.polynomial import hermite_e, legendre
from scipy import linalg, stats
from scipy.interpolate import CubicSpline

from fbsdej.deep_solver import PathBatch, check_noise
from fbsdej.exceptions import DivergenceError, IllConditionedError
from fbsdej.problem import ProblemSpec, TimeGrid
from fbsdej.stochastic_kernel import JumpMeasureSpec, NoiseBlock, compensated_gamma_sums, make_noise

logger = logging.getLogger(__name__)

BASIS_KINDS = ("polynomial", "piecewise_linear")
EXPECTATION_WEIGHTS = ("value", "dw", "gamma")
SPREAD_FLOOR = 1e-12
SAMPLES_PER_FEATURE = 10
ATOM_BUDGET = 2_000_000
SWEEP_COLUMNS = ["m", "sup_delta", "u_at_xi", "condition_number_max"]


# ─── Regression ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RegressionBasis:
    """Features on the sampled support, scaled to [-1, 1] per coordinate.

    polynomial: Legendre products of total degree <= `degree`.
    piecewise_linear: `knots` hat functions, one-dimensional states only.
    `clip` = (low, high) narrows the support taken from the samples.
    """

    kind: str = "polynomial"
    degree: int = 4
    knots: int = 8
    clip: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"Unknown basis kind '{self.kind}', expected one of {BASIS_KINDS}")
        if int(self.degree) < 1 or int(self.knots) < 2:
            raise ValueError(f"Need degree >= 1 and knots >= 2, got {self.degree}, {self.knots}")
        if self.clip is not None and not self.clip[0] < self.clip[1]:
            raise ValueError(f"Clip bounds must satisfy low < high, got {self.clip}")

    def dimension(self, d: int) -> int:
        if self.kind == "piecewise_linear":
            return int(self.knots)
        return comb(int(d) + int(self.degree), int(self.degree))

    def support(self, x: np.ndarray):
        low, high = x.min(axis=0), x.max(axis=0)
        if self.clip is not None:
            low = np.maximum(low, self.clip[0])
            high = np.minimum(high, self.clip[1])
        return low, np.maximum(high, low)

    def features(self, x: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
        scaled = np.clip(2.0 * (x - low) / (high - low) - 1.0, -1.0, 1.0)
        if self.kind == "piecewise_linear":
            if scaled.shape[1] != 1:
                raise ValueError("Piecewise-linear bases are one-dimensional")
            centres = np.linspace(-1.0, 1.0, int(self.knots))
            width = centres[1] - centres[0]
            return np.maximum(0.0, 1.0 - np.abs(scaled[:, :1] - centres[None, :]) / width)

        columns = [legendre.legvander(scaled[:, i], int(self.degree)) for i in range(scaled.shape[1])]
        features = [np.ones(scaled.shape[0])]
        for total in range(1, int(self.degree) + 1):
            for combo in combinations_with_replacement(range(scaled.shape[1]), total):
                powers = np.bincount(combo, minlength=scaled.shape[1])
                term = np.ones(scaled.shape[0])
                for i in np.nonzero(powers)[0]:
                    term = term * columns[i][:, powers[i]]
                features.append(term)
        return np.stack(features, axis=1)


@dataclass
class Regressor:
    """Fitted conditional expectation x -> E[Y | X = x].

    Coordinates whose sampled spread is below SPREAD_FLOOR are dropped; with
    none left the fit is the sample mean.
    """

    basis: RegressionBasis
    low: np.ndarray
    high: np.ndarray
    active: np.ndarray
    coef: np.ndarray
    offset: np.ndarray
    condition_number: float = 1.0
    scalar: bool = True

    def __call__(self, x) -> np.ndarray:
        x = _as_matrix(x, self.active.size)
        if self.active.any():
            phi = self.basis.features(x[:, self.active], self.low[self.active], self.high[self.active])
            values = phi @ self.coef + self.offset
        else:
            values = np.broadcast_to(self.offset, (x.shape[0], self.offset.size)).copy()
        return values[:, 0] if self.scalar else values


def _as_matrix(x, d: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d in (None, 1) else x[None, :]
    if d is not None and x.shape[1] != d:
        raise ValueError(f"Expected states with {d} coordinates, got shape {x.shape}")
    return x


def condexp_regress(x, y, basis: Optional[RegressionBasis] = None, ridge: float = 1e-8,
                    max_condition: float = 1e10) -> Regressor:
    """Least-squares estimate of E[y | x].

    Solves (Phi^T Phi / M + ridge I) c = Phi^T (y - mean y) / M, so constant
    responses come back exactly. y may be [M] or [M, k]; k outputs share one
    Gram matrix.
    """
    basis = basis or RegressionBasis()
    x = _as_matrix(x)
    y = np.asarray(y, dtype=float)
    samples = x.shape[0]
    if y.shape[0] != samples:
        raise ValueError(f"Got {samples} states but {y.shape[0]} responses")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DivergenceError("Non-finite regression data")
    scalar = y.ndim == 1
    response = y.reshape(samples, -1)
    offset = response.mean(axis=0)

    low, high = basis.support(x)
    active = (high - low) > SPREAD_FLOOR
    if not active.any():
        return Regressor(basis, low, high, active, np.zeros((0, response.shape[1])), offset, 1.0, scalar)

    dimension = basis.dimension(int(active.sum()))
    if samples < SAMPLES_PER_FEATURE * dimension:
        raise ValueError(f"Regression on {dimension} basis functions needs at least "
                         f"{SAMPLES_PER_FEATURE * dimension} samples, got {samples}")
    phi = basis.features(x[:, active], low[active], high[active])
    gram = phi.T @ phi / samples + ridge * np.eye(dimension)
    condition = float(np.linalg.cond(gram))
    if not np.isfinite(condition) or condition > max_condition:
        raise IllConditionedError(f"Regression Gram matrix has condition number {condition:.3e} "
                                  f"(limit {max_condition:.1e})", condition_number=condition)
    coef = linalg.solve(gram, phi.T @ (response - offset) / samples, assume_a="pos")
    return Regressor(basis, low, high, active, coef, offset, condition, scalar)


def project_z(x, y_next, dW, dt: float, basis: Optional[RegressionBasis] = None, **options) -> Regressor:
    """Z_n(x) = E[Y_{n+1} dW | X_n = x] / dt, one output per Brownian coordinate."""
    dW = np.asarray(dW, dtype=float)
    y_next = np.asarray(y_next, dtype=float)
    if dW.ndim == 1:
        dW = dW[:, None]
    if dW.shape[0] != y_next.shape[0]:
        raise ValueError(f"Got {y_next.shape[0]} responses but {dW.shape[0]} Brownian increments")
    if not dt > 0:
        raise ValueError(f"Step size must be positive, got {dt}")
    return condexp_regress(x, y_next[:, None] * dW / dt, basis, **options)


def project_gamma(x, y_next, jump_weights, dt: float, basis: Optional[RegressionBasis] = None,
                  **options) -> Regressor:
    """Gamma_n(x) = E[Y_{n+1} M_gamma | X_n = x] / dt.

    jump_weights holds the realised M_gamma = sum_k gamma(e_k) - dt * integral
    of gamma against lambda, per sample.
    """
    jump_weights = np.asarray(jump_weights, dtype=float)
    y_next = np.asarray(y_next, dtype=float)
    if jump_weights.shape != y_next.shape:
        raise ValueError(f"Got {y_next.shape} responses but jump weights of shape {jump_weights.shape}")
    if not dt > 0:
        raise ValueError(f"Step size must be positive, got {dt}")
    return condexp_regress(x, y_next * jump_weights / dt, basis, **options)


# ─── Paths under a value function ───────────────────────────────────────────

def _simulate(spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock, value: Callable, z_at: Callable,
              gamma_at: Callable) -> PathBatch:
    check_noise(spec, grid, noise)
    samples, steps = noise.samples, grid.steps
    X = np.empty((samples, steps + 1, spec.d))
    Y = np.empty((samples, steps + 1))
    Z = np.empty((samples, steps, spec.d))
    G = np.empty((samples, steps))
    x = spec.initial_state(samples)
    for n in range(steps):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        y = value(n, x)
        X[:, n], Y[:, n] = x, y
        Z[:, n] = np.asarray(z_at(n, x)).reshape(samples, spec.d)
        G[:, n] = gamma_at(n, x)
        x = x + spec.forward_increment(t, dt, x, y, noise.dW[:, n], noise.marks[:, n], noise.mask[:, n])
    X[:, steps] = x
    Y[:, steps] = spec.terminal_g(x)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DivergenceError("Non-finite state while simulating solution paths")
    return PathBatch(X=X, Y=Y, Z=Z, Gamma=G, noise=noise, terminal_x=x, terminal_y=Y[:, steps])


def _forward(spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock, value: Callable) -> np.ndarray:
    X = np.empty((noise.samples, grid.steps + 1, spec.d))
    x = spec.initial_state(noise.samples)
    X[:, 0] = x
    for n in range(grid.steps):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        x = x + spec.forward_increment(t, dt, x, value(n, x), noise.dW[:, n], noise.marks[:, n], noise.mask[:, n])
        X[:, n + 1] = x
    if not np.all(np.isfinite(X)):
        raise DivergenceError("Non-finite forward state in Markovian sweep")
    return X


# ─── Regression sweeps ──────────────────────────────────────────────────────

@dataclass
class MarkovianState:
    """Per-step regressors for u, Z and Gamma after sweep m (m = 0 means u = 0)."""

    grid: TimeGrid
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    value: list = field(default_factory=list)
    z: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    m: int = 0
    deltas: list = field(default_factory=list)
    condition_max: list = field(default_factory=list)
    u_at_xi: list = field(default_factory=list)

    def u(self, n: int, x) -> np.ndarray:
        if not 0 <= n < self.grid.steps:
            raise IndexError(f"Step {n} outside 0..{self.grid.steps - 1}")
        if self.m == 0:
            return np.zeros(np.shape(x)[0])
        return self.value[n](x)

    def z_at(self, n: int, x) -> np.ndarray:
        if self.m == 0:
            return np.zeros(np.shape(x))
        return self.z[n](x)

    def gamma_at(self, n: int, x) -> np.ndarray:
        if self.m == 0:
            return np.zeros(np.shape(x)[0])
        return self.gamma[n](x)

    def simulate_paths(self, spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock) -> PathBatch:
        if grid.steps != self.grid.steps:
            raise ValueError(f"State was built on {self.grid.steps} steps, grid has {grid.steps}")
        return _simulate(spec, grid, noise, self.u, self.z_at, self.gamma_at)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "m": np.arange(1, len(self.deltas) + 1),
            "sup_delta": self.deltas,
            "u_at_xi": self.u_at_xi,
            "condition_number_max": self.condition_max,
        }, columns=SWEEP_COLUMNS)


def markovian_sweep(state: MarkovianState, spec: ProblemSpec, grid: TimeGrid, samples: int,
                    basis: Optional[RegressionBasis] = None, seed: int = 0, eval_points: int = 200,
                    noise_mode: str = "strict", ridge: float = 1e-8, max_condition: float = 1e10) -> MarkovianState:
    """One sweep: forward under u_{m-1}, backward regression recursion for u_m.

    Every sweep reuses the noise of `seed`, so for decoupled problems sweep 2
    reproduces sweep 1 exactly.
    """
    if grid.steps != state.grid.steps:
        raise ValueError(f"State was built on {state.grid.steps} steps, grid has {grid.steps}")
    basis = basis or state.basis
    options = {"ridge": ridge, "max_condition": max_condition}
    noise = make_noise(grid, spec.d, samples, spec.measure, seed, mode=noise_mode)
    X = _forward(spec, grid, noise, state.u)
    jumps = compensated_gamma_sums(noise, spec.measure)

    steps = grid.steps
    values, zs, gammas = [None] * steps, [None] * steps, [None] * steps
    condition = 1.0
    y_next = np.asarray(spec.terminal_g(X[:, steps]), dtype=float)
    for n in reversed(range(steps)):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        x = X[:, n]
        z_fit = project_z(x, y_next, noise.dW[:, n], dt, basis, **options)
        gamma_fit = project_gamma(x, y_next, jumps[:, n], dt, basis, **options)
        target = y_next + np.asarray(spec.driver_f(t, x, y_next, z_fit(x), gamma_fit(x))) * dt
        value_fit = condexp_regress(x, target, basis, **options)
        y_next = value_fit(x)
        if not np.all(np.isfinite(y_next)):
            raise DivergenceError(f"Non-finite value estimate at step {n}", step=n)
        values[n], zs[n], gammas[n] = value_fit, z_fit, gamma_fit
        condition = max(condition, z_fit.condition_number, gamma_fit.condition_number, value_fit.condition_number)

    updated = MarkovianState(grid=grid, basis=basis, value=values, z=zs, gamma=gammas, m=state.m + 1)
    checked = min(int(eval_points), samples)
    delta = max(float(np.max(np.abs(updated.u(n, X[:checked, n]) - state.u(n, X[:checked, n])))) for n in range(steps))
    xi_value = float(updated.u(0, spec.xi[None, :])[0])
    updated.deltas = state.deltas + [delta]
    updated.condition_max = state.condition_max + [condition]
    updated.u_at_xi = state.u_at_xi + [xi_value]
    return updated


def run_markovian(spec: ProblemSpec, grid: TimeGrid, samples: int, basis: Optional[RegressionBasis] = None,
                  max_sweeps: int = 20, tol: float = 1e-3, seed: int = 0, **options) -> MarkovianState:
    """Sweep until sup-delta < tol or max_sweeps is reached."""
    if int(max_sweeps) < 1:
        raise ValueError(f"max_sweeps must be at least 1, got {max_sweeps}")
    state = MarkovianState(grid=grid, basis=basis or RegressionBasis())
    for _ in range(int(max_sweeps)):
        state = markovian_sweep(state, spec, grid, samples, state.basis, seed=seed, **options)
        logger.info(f"Sweep {state.m}: sup delta {state.deltas[-1]:.3e}, u(0, xi) {state.u_at_xi[-1]:.5f}, "
                    f"max condition {state.condition_max[-1]:.2e}")
        if state.deltas[-1] < tol:
            return state
    logger.warning(f"Markovian iteration stopped at {max_sweeps} sweeps with sup delta {state.deltas[-1]:.3e}")
    return state


# ─── Quadrature oracle (d = 1) ──────────────────────────────────────────────

def _compress(values: np.ndarray, probs: np.ndarray, size: int):
    """Gauss rule of `size` atoms matching the moments of a discrete law up to degree 2*size - 1.

    Lanczos on diag(values) from sqrt(probs), with full reorthogonalisation.
    """
    mass = float(np.sum(probs))
    if values.size <= size or mass == 0.0:
        return values, probs
    centre = float(probs @ values) / mass
    spread = np.sqrt(float(probs @ (values - centre) ** 2) / mass)
    if spread == 0.0:
        return np.array([centre]), np.array([mass])

    scaled = (values - centre) / spread
    basis = np.zeros((values.size, size))
    basis[:, 0] = np.sqrt(probs / mass)
    alpha, beta = [], []
    for j in range(size):
        r = scaled * basis[:, j]
        alpha.append(float(basis[:, j] @ r))
        r = r - alpha[-1] * basis[:, j]
        if j:
            r = r - beta[-1] * basis[:, j - 1]
        for _ in range(2):
            r = r - basis[:, :j + 1] @ (basis[:, :j + 1].T @ r)
        norm = float(np.linalg.norm(r))
        if j == size - 1 or norm < 1e-12:
            break
        beta.append(norm)
        basis[:, j + 1] = r / norm
    nodes, vectors = linalg.eigh_tridiagonal(np.array(alpha), np.array(beta))
    return centre + spread * nodes, mass * vectors[0] ** 2


class QuadratureOracle:
    """E[phi(X_{n+1}) | X_n = x] in one dimension by deterministic quadrature.

    The Gaussian increment uses a Gauss-Hermite rule. The jump count is
    Poisson(lambda dt) truncated where its tail drops below `tail`; the sum of
    k jump sizes is the mark rule convolved k times, each convolution
    compressed to `compressed_size` atoms.
    """

    def __init__(self, measure: JumpMeasureSpec, hermite_order: int = 24, compressed_size: int = 12,
                 tail: float = 1e-12, max_jumps: int = 60):
        self.measure = measure
        nodes, weights = hermite_e.hermegauss(int(hermite_order))
        self.hermite_nodes = nodes
        self.hermite_weights = weights / np.sqrt(2.0 * np.pi)
        self.compressed_size = int(compressed_size)
        self.tail = float(tail)
        self.max_jumps = int(max_jumps)
        self._sums = {}
        self._atoms = {}

    def jump_counts(self, dt: float) -> np.ndarray:
        """Poisson probabilities pi_0..pi_K of the jump count on an interval of length dt."""
        rate = self.measure.total_intensity * float(dt)
        if rate == 0.0:
            return np.ones(1)
        counts = np.arange(self.max_jumps + 1)
        tails = stats.poisson.sf(counts, rate)
        below = np.nonzero(tails < self.tail)[0]
        if below.size:
            last = int(below[0])
        else:
            last = self.max_jumps
            logger.warning(f"Poisson tail {tails[-1]:.2e} at {self.max_jumps} jumps is above {self.tail:.0e} "
                           f"(rate {rate:.3g})")
        return stats.poisson.pmf(np.arange(last + 1), rate)

    def jump_sums(self, beta_nodes: np.ndarray, count: int) -> list:
        """Discrete laws (values, probs) of S_0..S_count for jumps beta(e) at the mark nodes."""
        key = beta_nodes.tobytes()
        rules = self._sums.setdefault(key, [(np.zeros(1), np.ones(1)),
                                            (beta_nodes.copy(), self.measure.mark_probabilities.copy())])
        single_values, single_probs = rules[1]
        while len(rules) <= count:
            values, probs = rules[-1]
            joint_values = (values[:, None] + single_values[None, :]).ravel()
            joint_probs = (probs[:, None] * single_probs[None, :]).ravel()
            rules.append(_compress(joint_values, joint_probs, self.compressed_size))
        return rules[:count + 1]

    def jump_atoms(self, dt: float, beta_nodes: np.ndarray):
        """Atoms (offsets, weights) of the jump part for each weighting.

        "value" integrates Y(x + S_K); "gamma" integrates Y(x + S_K) * M_gamma.
        """
        key = (float(dt), beta_nodes.tobytes())
        if key in self._atoms:
            return self._atoms[key]
        pi = self.jump_counts(dt)
        sums = self.jump_sums(beta_nodes, pi.size - 1)
        value_offsets = np.concatenate([s for s, _ in sums])
        value_weights = np.concatenate([p_k * r for p_k, (_, r) in zip(pi, sums)])

        gamma_offsets, gamma_weights = [], []
        marked = self.measure.mark_probabilities * self.measure.gamma_values
        for k in range(1, pi.size):
            previous, probs = sums[k - 1]
            offsets = (beta_nodes[:, None] + previous[None, :]).ravel()
            weights = (pi[k] * k * marked[:, None] * probs[None, :]).ravel()
            for sign in (1.0, -1.0):
                part = sign * weights > 0
                if part.any():
                    atoms, masses = _compress(offsets[part], sign * weights[part], self.compressed_size)
                    gamma_offsets.append(atoms)
                    gamma_weights.append(sign * masses)
        gamma_offsets.append(value_offsets)
        gamma_weights.append(-float(dt) * self.measure.gamma_integral * value_weights)

        atoms = {
            "value": (value_offsets, value_weights),
            "gamma": (np.concatenate(gamma_offsets), np.concatenate(gamma_weights)),
        }
        self._atoms[key] = atoms
        return atoms

    def expect(self, func: Callable, x, dt: float, drift, sigma, beta_nodes, weight: str = "value") -> np.ndarray:
        """E[func(X_{n+1}) w] per point, X_{n+1} = x + drift + sigma dW + S.

        w is 1 ("value"), dW ("dw") or M_gamma ("gamma"). func(x_next, rows)
        receives x_next of shape [len(rows), atoms] and the indices of the
        points it belongs to. Points sharing the same jump coefficients are
        evaluated together.
        """
        if weight not in EXPECTATION_WEIGHTS:
            raise ValueError(f"Unknown weight '{weight}', expected one of {EXPECTATION_WEIGHTS}")
        if dt < 0:
            raise ValueError(f"Step size must be non-negative, got {dt}")
        x = np.asarray(x, dtype=float)
        drift, sigma = np.asarray(drift, dtype=float), np.asarray(sigma, dtype=float)
        beta_nodes = np.asarray(beta_nodes, dtype=float)
        root_dt = np.sqrt(float(dt))
        h_weights = self.hermite_weights * (root_dt * self.hermite_nodes if weight == "dw" else 1.0)

        result = np.empty(x.size)
        groups, labels = np.unique(beta_nodes, axis=0, return_inverse=True)
        for label, row in enumerate(groups):
            members = np.nonzero(np.ravel(labels) == label)[0]
            offsets, weights = self.jump_atoms(dt, row)["gamma" if weight == "gamma" else "value"]
            atom_weights = np.outer(h_weights, weights).ravel()
            chunk = max(1, ATOM_BUDGET // atom_weights.size)
            for start in range(0, members.size, chunk):
                rows = members[start:start + chunk]
                base = (x[rows] + drift[rows])[:, None] + sigma[rows, None] * root_dt * self.hermite_nodes[None, :]
                x_next = (base[:, :, None] + offsets[None, None, :]).reshape(rows.size, -1)
                values = np.asarray(func(x_next, rows), dtype=float)
                if not np.all(np.isfinite(values)):
                    raise DivergenceError("Non-finite integrand in quadrature oracle")
                result[rows] = values @ atom_weights
        return result


def _coefficients_1d(spec: ProblemSpec, t: float, dt: float, x: np.ndarray, y: np.ndarray):
    points = x[:, None]
    rows = x.size
    drift = np.asarray(spec.b(t, points, y), dtype=float)[:, 0]
    sigma = np.asarray(spec.sigma(t, points, y), dtype=float)[:, 0, 0]
    beta_nodes = np.stack([np.asarray(spec.beta(t, points, y, np.full(rows, e)), dtype=float)[:, 0]
                           for e in spec.measure.nodes], axis=1)
    compensator = beta_nodes @ spec.measure.lambda_weights
    return drift * dt - dt * compensator, sigma, beta_nodes


def condexp_quadrature_1d(spec: ProblemSpec, y_next: Callable, x, dt: float, t: float = 0.0, y=None,
                          oracle: Optional[QuadratureOracle] = None, weight: str = "value"):
    """E[y_next(X_{n+1}) | X_n = x] for a one-dimensional problem.

    y_next maps a 1-d array of states to values. `y` feeds the coefficients
    of coupled problems (zero when omitted). weight="dw" or "gamma" returns
    E[y_next dW] or E[y_next M_gamma] instead.
    """
    if spec.d != 1:
        raise ValueError(f"Quadrature conditional expectations need d = 1, problem has d = {spec.d}")
    oracle = oracle or QuadratureOracle(spec.measure)
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    y = np.zeros(x.size) if y is None else np.broadcast_to(np.asarray(y, dtype=float), x.shape).copy()
    drift, sigma, beta_nodes = _coefficients_1d(spec, t, dt, x, y)

    def evaluate(x_next, rows):
        return np.asarray(y_next(x_next.ravel()), dtype=float).reshape(x_next.shape)

    values = oracle.expect(evaluate, x, dt, drift, sigma, beta_nodes, weight)
    return float(values[0]) if scalar else values


# ─── Grid backward scheme (d = 1) ───────────────────────────────────────────

@dataclass
class GridSolution:
    """u, Z and Gamma on a state grid per time node, read through cubic splines.

    Queries outside the grid are clamped to its end points.
    """

    grid: TimeGrid
    x_grid: np.ndarray
    values: np.ndarray
    z: np.ndarray
    gamma: np.ndarray
    xi: float = 0.0
    sweep: int = 1
    deltas: list = field(default_factory=list)
    u_at_xi: list = field(default_factory=list)

    @cached_property
    def _splines(self):
        return ([CubicSpline(self.x_grid, row) for row in self.values],
                [CubicSpline(self.x_grid, row) for row in self.z],
                [CubicSpline(self.x_grid, row) for row in self.gamma])

    def _read(self, table: int, n: int, x) -> np.ndarray:
        points = np.clip(np.asarray(x, dtype=float).reshape(-1), self.x_grid[0], self.x_grid[-1])
        return self._splines[table][n](points)

    def u(self, n: int, x) -> np.ndarray:
        return self._read(0, n, x)

    def z_at(self, n: int, x) -> np.ndarray:
        return self._read(1, n, x)[:, None]

    def gamma_at(self, n: int, x) -> np.ndarray:
        return self._read(2, n, x)

    def simulate_paths(self, spec: ProblemSpec, grid: TimeGrid, noise: NoiseBlock) -> PathBatch:
        if grid.steps != self.grid.steps:
            raise ValueError(f"Solution was built on {self.grid.steps} steps, grid has {grid.steps}")
        return _simulate(spec, grid, noise, self.u, self.z_at, self.gamma_at)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"m": np.arange(1, len(self.deltas) + 1), "sup_delta": self.deltas,
                             "u_at_xi": self.u_at_xi, "condition_number_max": np.nan}, columns=SWEEP_COLUMNS)


def default_state_grid(spec: ProblemSpec, half_width: float = 8.0, points: int = 321) -> np.ndarray:
    return np.linspace(spec.xi[0] - half_width, spec.xi[0] + half_width, int(points))


def quadrature_backward(spec: ProblemSpec, grid: TimeGrid, x_grid=None, previous: Optional[GridSolution] = None,
                        oracle: Optional[QuadratureOracle] = None) -> GridSolution:
    """Backward recursion on a state grid with quadrature conditional expectations.

    `previous` supplies y in the coefficients of coupled problems (u = 0 when
    omitted).
    """
    if spec.d != 1:
        raise ValueError(f"The grid scheme needs d = 1, problem has d = {spec.d}")
    x_grid = default_state_grid(spec) if x_grid is None else np.asarray(x_grid, dtype=float)
    if x_grid.ndim != 1 or x_grid.size < 4 or not np.all(np.diff(x_grid) > 0):
        raise ValueError("State grid must be increasing with at least 4 points")
    oracle = oracle or QuadratureOracle(spec.measure)
    steps, size = grid.steps, x_grid.size
    low, high = x_grid[0], x_grid[-1]

    values = np.empty((steps + 1, size))
    z = np.empty((steps, size))
    gamma = np.empty((steps, size))
    values[steps] = spec.terminal_g(x_grid[:, None])

    for n in reversed(range(steps)):
        t, dt = float(grid.nodes[n]), float(grid.dt[n])
        if n + 1 == steps:
            def next_value(points):
                return np.asarray(spec.terminal_g(points[:, None]), dtype=float)
        else:
            spline = CubicSpline(x_grid, values[n + 1])

            def next_value(points, spline=spline):
                return spline(np.clip(points, low, high))

        coupling = previous.u(n, x_grid) if previous is not None else np.zeros(size)
        drift, sigma, beta_nodes = _coefficients_1d(spec, t, dt, x_grid, coupling)

        def evaluate(x_next, rows):
            return next_value(x_next.ravel()).reshape(x_next.shape)

        z[n] = oracle.expect(evaluate, x_grid, dt, drift, sigma, beta_nodes, "dw") / dt
        gamma[n] = oracle.expect(evaluate, x_grid, dt, drift, sigma, beta_nodes, "gamma") / dt

        def target(x_next, rows):
            y_at = evaluate(x_next, rows)
            width = x_next.shape[1]
            driver = spec.driver_f(t, np.repeat(x_grid[rows], width)[:, None], y_at.ravel(),
                                   np.repeat(z[n, rows], width)[:, None], np.repeat(gamma[n, rows], width))
            return y_at + dt * np.asarray(driver, dtype=float).reshape(x_next.shape)

        values[n] = oracle.expect(target, x_grid, dt, drift, sigma, beta_nodes, "value")
        if not np.all(np.isfinite(values[n])):
            raise DivergenceError(f"Non-finite grid values at step {n}", step=n)

    solution = GridSolution(grid=grid, x_grid=x_grid, values=values, z=z, gamma=gamma, xi=float(spec.xi[0]))
    solution.deltas = [float(np.max(np.abs(values[:-1] - (previous.values[:-1] if previous is not None else 0.0))))]
    solution.u_at_xi = [float(solution.u(0, spec.xi)[0])]
    return solution


def run_markovian_quadrature(spec: ProblemSpec, grid: TimeGrid, x_grid=None, max_sweeps: int = 20,
                             tol: float = 1e-3, oracle: Optional[QuadratureOracle] = None) -> GridSolution:
    """Grid sweeps until the sup-norm change of u drops below tol.

    Decoupled problems are solved by the first sweep.
    """
    oracle = oracle or QuadratureOracle(spec.measure)
    previous, deltas, at_xi = None, [], []
    for sweep in range(1, int(max_sweeps) + 1):
        solution = quadrature_backward(spec, grid, x_grid, previous=previous, oracle=oracle)
        deltas += solution.deltas
        at_xi += solution.u_at_xi
        solution.sweep, solution.deltas, solution.u_at_xi = sweep, list(deltas), list(at_xi)
        logger.info(f"Grid sweep {sweep}: sup delta {deltas[-1]:.3e}, u(0, xi) {at_xi[-1]:.5f}")
        if not spec.coupled or deltas[-1] < tol:
            return solution
        previous = solution
    logger.warning(f"Grid iteration stopped at {max_sweeps} sweeps with sup delta {deltas[-1]:.3e}")
    return solution
