"""Driving noise for jump-diffusions and quadrature over the mark space.

Marks are scalar and live on [-delta, delta]. Jumps are kept per interval as a
count plus the marks drawn in that interval, which is all an Euler step needs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from fbsdej.exceptions import DivergenceError

if TYPE_CHECKING:
    from fbsdej.problem import TimeGrid

logger = logging.getLogger(__name__)

DENSITY_TOLERANCE = 1e-10
NOISE_MODES = ("strict", "fast")
_CDF_POINTS = 4097


def unit_weight(e):
    """gamma(e) = 1 on the whole mark space."""
    return np.ones_like(np.asarray(e, dtype=float))


# ─── Jump measure ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class JumpMeasureSpec:
    """Finite jump measure lambda(de) = total_intensity * density(e) de on [-delta, delta].

    `density` and `gamma` must accept numpy arrays. `sampler(rng, size)` draws
    marks from the density; when omitted marks are drawn by inverse CDF.
    """

    delta: float
    density: Callable
    total_intensity: float
    gamma: Callable = unit_weight
    gamma_bound: float = 1.0
    quad_order: int = 32
    sampler: Optional[Callable] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"Mark half-width delta must be positive, got {self.delta}")
        if self.total_intensity < 0:
            raise ValueError(f"Total intensity must be non-negative, got {self.total_intensity}")
        if self.gamma_bound < 0:
            raise ValueError(f"gamma_bound must be non-negative, got {self.gamma_bound}")
        if int(self.quad_order) < 1:
            raise ValueError(f"quad_order must be a positive integer, got {self.quad_order}")

        mass = float(self.weights @ self.density_values)
        if abs(mass - 1.0) > DENSITY_TOLERANCE:
            raise ValueError(f"Mark density integrates to {mass:.12f} on [-delta, delta], expected 1")
        gamma_max = float(np.max(np.abs(self.gamma_values)))
        if gamma_max > self.gamma_bound * (1.0 + 1e-12):
            raise ValueError(f"|gamma| reaches {gamma_max} on the quadrature nodes, "
                             f"above gamma_bound={self.gamma_bound}")

    @classmethod
    def uniform(cls, delta=1.0, gamma=None, gamma_bound=1.0, quad_order=32):
        """lambda(de) = de on [-delta, delta], so the total intensity is 2*delta."""
        half_width = float(delta)
        if not half_width > 0:
            raise ValueError(f"Mark half-width delta must be positive, got {delta}")

        def density(e):
            return np.full_like(np.asarray(e, dtype=float), 1.0 / (2.0 * half_width))

        def sampler(rng, size):
            return rng.uniform(-half_width, half_width, size)

        return cls(
            delta=half_width,
            density=density,
            total_intensity=2.0 * half_width,
            gamma=gamma if gamma is not None else unit_weight,
            gamma_bound=gamma_bound,
            quad_order=int(quad_order),
            sampler=sampler,
        )

    @cached_property
    def _rule(self):
        unit_nodes, unit_weights = np.polynomial.legendre.leggauss(int(self.quad_order))
        return self.delta * unit_nodes, self.delta * unit_weights

    @property
    def nodes(self) -> np.ndarray:
        return self._rule[0]

    @property
    def weights(self) -> np.ndarray:
        """Gauss-Legendre weights for plain integration over [-delta, delta]."""
        return self._rule[1]

    @cached_property
    def density_values(self) -> np.ndarray:
        return np.asarray(self.density(self.nodes), dtype=float)

    @cached_property
    def gamma_values(self) -> np.ndarray:
        return np.asarray(self.gamma(self.nodes), dtype=float)

    @cached_property
    def lambda_weights(self) -> np.ndarray:
        """Weights w_k with sum_k w_k g(e_k) ~ integral of g against lambda(de)."""
        return self.weights * self.total_intensity * self.density_values

    @cached_property
    def gamma_weights(self) -> np.ndarray:
        """Weights for integrals against gamma(e) lambda(de)."""
        return self.lambda_weights * self.gamma_values

    @cached_property
    def mark_probabilities(self) -> np.ndarray:
        """Quadrature weights of the mark law rho(e) de (sum to one)."""
        return self.weights * self.density_values

    @cached_property
    def gamma_integral(self) -> float:
        return float(np.sum(self.gamma_weights))

    @cached_property
    def _inverse_cdf(self):
        grid = np.linspace(-self.delta, self.delta, _CDF_POINTS)
        pdf = np.clip(np.asarray(self.density(grid), dtype=float), 0.0, None)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
        return cdf / cdf[-1], grid

    def sample_marks(self, rng: np.random.Generator, size) -> np.ndarray:
        """Draw i.i.d. marks from the density."""
        if self.sampler is not None:
            return np.asarray(self.sampler(rng, size), dtype=float)
        cdf, grid = self._inverse_cdf
        return np.interp(rng.random(size), cdf, grid)


# ─── Noise ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NoiseBlock:
    """Brownian increments and per-interval jump marks for a batch of paths.

    dW has shape [samples, steps, d]. The jump list of interval n for sample i
    is marks[i, n, :counts[i, n]]; the remaining slots are zero padding.
    """

    dW: np.ndarray
    counts: np.ndarray
    marks: np.ndarray
    seed: int
    grid: "TimeGrid"
    mode: str = "strict"

    @property
    def samples(self) -> int:
        return self.dW.shape[0]

    @property
    def steps(self) -> int:
        return self.dW.shape[1]

    @property
    def dim(self) -> int:
        return self.dW.shape[2]

    @property
    def max_jumps(self) -> int:
        return self.marks.shape[2]

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean [samples, steps, K]: True where a slot holds a real mark."""
        return np.arange(self.max_jumps)[None, None, :] < self.counts[:, :, None]

    def jump_list(self, sample: int, step: int) -> list:
        return self.marks[sample, step, :self.counts[sample, step]].tolist()


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for (seed, keys...)."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, np.uint64)[0])


def sample_generator(seed: int, sample: int) -> np.random.Generator:
    """Counter-based stream owned by one sample path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(sample),))))


def _check_grid_nodes(grid) -> np.ndarray:
    nodes = np.asarray(grid.nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2:
        raise ValueError("Time grid needs at least one step")
    if not np.all(np.diff(nodes) > 0):
        raise ValueError("Time grid nodes must be strictly increasing")
    return nodes


def make_noise(grid: "TimeGrid", d: int, samples: int, measure: JumpMeasureSpec, seed: int,
               mode: str = "strict") -> NoiseBlock:
    """Generate the driving noise of `samples` paths on `grid`.

    strict: every sample draws from its own Philox stream keyed by (seed, sample)
    and takes its steps from that stream in order, so any subset of samples can
    be regenerated independently of batch size and generation order.
    fast: one stream for the whole block, fully vectorised.
    """
    if int(d) < 1:
        raise ValueError(f"Dimension must be at least 1, got {d}")
    if int(samples) < 1:
        raise ValueError(f"Sample count must be at least 1, got {samples}")
    if int(seed) < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    if mode not in NOISE_MODES:
        raise ValueError(f"Unknown noise mode '{mode}', expected one of {NOISE_MODES}")

    nodes = _check_grid_nodes(grid)
    d, samples = int(d), int(samples)
    dt = np.diff(nodes)
    steps = dt.size
    root_dt = np.sqrt(dt)
    rates = measure.total_intensity * dt

    if mode == "fast":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
        dW = rng.standard_normal((samples, steps, d)) * root_dt[None, :, None]
        counts = rng.poisson(rates, size=(samples, steps)).astype(np.int64)
        width = int(counts.max()) if counts.size else 0
        marks = measure.sample_marks(rng, (samples, steps, width))
        marks = np.where(np.arange(width)[None, None, :] < counts[:, :, None], marks, 0.0)
        return NoiseBlock(dW=dW, counts=counts, marks=marks, seed=int(seed), grid=grid, mode=mode)

    dW = np.empty((samples, steps, d))
    counts = np.empty((samples, steps), dtype=np.int64)
    drawn = []
    for i in range(samples):
        rng = sample_generator(seed, i)
        dW[i] = rng.standard_normal((steps, d)) * root_dt[:, None]
        counts[i] = rng.poisson(rates)
        drawn.append(measure.sample_marks(rng, int(counts[i].sum())))

    width = int(counts.max()) if counts.size else 0
    marks = np.zeros((samples, steps, width))
    for i, row in enumerate(drawn):
        if row.size == 0:
            continue
        step_index = np.repeat(np.arange(steps), counts[i])
        starts = np.repeat(np.cumsum(counts[i]) - counts[i], counts[i])
        marks[i, step_index, np.arange(row.size) - starts] = row
    return NoiseBlock(dW=dW, counts=counts, marks=marks, seed=int(seed), grid=grid, mode=mode)


def compensated_gamma_sums(noise: NoiseBlock, measure: JumpMeasureSpec) -> np.ndarray:
    """M_gamma per sample and interval: sum_k gamma(e_k) - dt * integral of gamma against lambda."""
    dt = np.diff(np.asarray(noise.grid.nodes, dtype=float))
    if noise.max_jumps:
        weights = np.where(noise.mask, np.asarray(measure.gamma(noise.marks), dtype=float), 0.0).sum(axis=2)
    else:
        weights = np.zeros(noise.counts.shape)
    return weights - dt[None, :] * measure.gamma_integral


# ─── Quadrature ─────────────────────────────────────────────────────────────

def levy_integral(g: Callable, measure: JumpMeasureSpec):
    """Integral of g(e) against lambda(de) by Gauss-Legendre quadrature.

    g may return a scalar or an array per mark; the result has that shape.
    """
    values = np.asarray([g(e) for e in measure.nodes], dtype=float)
    if not np.all(np.isfinite(values)):
        raise DivergenceError("Non-finite integrand in levy_integral")
    result = np.tensordot(measure.lambda_weights, values, axes=1)
    return float(result) if np.ndim(result) == 0 else result


def compensator_drift(beta_at: Callable, measure: JumpMeasureSpec):
    """Integral of beta(e) against lambda(de), componentwise.

    Works for tape tensors as well as arrays; tensors are summed node by node.
    """
    values = [beta_at(e) for e in measure.nodes]
    if any(not isinstance(v, (np.ndarray, float, int, np.floating)) for v in values):
        return sum(w * v for w, v in zip(measure.lambda_weights, values))
    stacked = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(stacked)):
        raise DivergenceError("Non-finite jump coefficient in compensator_drift")
    return np.tensordot(measure.lambda_weights, stacked, axes=1)
