"""Iterative proportional fitting of a joint distribution to 1-D marginals.

Two storage layouts share one update rule (scale every slice along dimension
``d`` by ``t_d / m_d``):

* a cell list (integer coordinates plus weights) holding only nonzero cells,
  used for small problems and for explicitly supplied seeds;
* a product form, one factor vector per dimension, used when the seed is
  uniform and the dense array would be too large. A uniform seed is rank one
  and every IPF update multiplies a single factor, so the product form is the
  exact IPF trajectory rather than an approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .census import MarginalTable
from .errors import DomainError

DENSE_CELL_LIMIT = 2_000_000


@dataclass(frozen=True)
class IpfConfig:
    max_iterations: int = 10
    epsilon: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise DomainError("max_iterations must be at least 1")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class JointDistribution:
    dimensions: tuple[str, ...]
    categories: tuple[tuple[str, ...], ...]
    targets: tuple[np.ndarray, ...]
    iterations: int
    converged: bool
    max_deviation: float
    coords: np.ndarray | None = None
    weights: np.ndarray | None = None
    factors: tuple[np.ndarray, ...] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.targets)

    @property
    def is_product(self) -> bool:
        return self.factors is not None

    def total(self) -> float:
        if self.is_product:
            return math.prod(float(f.sum()) for f in self.factors)
        return float(self.weights.sum())

    def marginal(self, d: int) -> np.ndarray:
        if self.is_product:
            return _product_marginal(self.factors, d)
        return np.bincount(self.coords[:, d], weights=self.weights, minlength=self.shape[d])

    def marginal_deviation(self) -> float:
        return max(float(np.max(np.abs(self.marginal(d) - t))) for d, t in enumerate(self.targets))

    def to_dense(self) -> np.ndarray:
        if math.prod(self.shape) > DENSE_CELL_LIMIT:
            raise DomainError(f"dense array of shape {self.shape} is too large")
        if self.is_product:
            out = np.ones(())
            for f in self.factors:
                out = np.multiply.outer(out, f)
            return out
        out = np.zeros(self.shape)
        out[tuple(self.coords.T)] = self.weights
        return out

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Sample ``n`` cells; returns an (n, D) array of category indices."""
        if self.is_product:
            cols = []
            for f in self.factors:
                cdf = np.cumsum(f / f.sum())
                cols.append(np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(f) - 1))
            return np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64)
        cdf = np.cumsum(self.weights / self.weights.sum())
        picks = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)
        return self.coords[picks]


def _product_marginal(factors, d):
    rest = math.prod(float(f.sum()) for e, f in enumerate(factors) if e != d)
    return factors[d] * rest


def _ratio(target, current):
    out = np.zeros_like(target)
    np.divide(target, current, out=out, where=current > 0)
    return out


def normalize_targets(targets: Sequence, rtol: float = 1e-9) -> list[np.ndarray]:
    """Turn count or probability vectors into probability vectors.

    All vectors must describe the same total mass; pass MarginalTables through
    :func:`ipf_fit` to normalize tables with different universes separately.
    """
    arrays = [np.asarray(t, dtype=float) for t in targets]
    if not arrays:
        raise DomainError("at least one target marginal is required")
    for d, a in enumerate(arrays):
        if a.ndim != 1 or a.size == 0:
            raise DomainError(f"target {d} must be a nonempty vector")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise DomainError(f"target {d} contains a negative or non-finite entry")
    totals = [float(a.sum()) for a in arrays]
    if totals[0] <= 0:
        raise DomainError("target marginals have zero mass")
    for d, total in enumerate(totals):
        if abs(total - totals[0]) > rtol * totals[0]:
            raise DomainError(f"target {d} sums to {total!r}, inconsistent with {totals[0]!r}")
    return [a / totals[0] for a in arrays]


def ipf_cells(coords, weights, targets, max_iterations, epsilon, on_update: Callable | None = None):
    """Run IPF over an explicit cell list. Returns (coords, weights, iterations, converged, deviation)."""
    coords = np.asarray(coords, dtype=np.int64)
    weights = np.asarray(weights, dtype=float).copy()
    keep = weights > 0
    for d, t in enumerate(targets):
        keep &= t[coords[:, d]] > 0
    coords, weights = coords[keep], weights[keep]
    if weights.size == 0:
        raise DomainError("seed has no mass on cells the targets allow")
    weights /= weights.sum()
    shape = [len(t) for t in targets]
    deviation = math.inf
    for k in range(1, max_iterations + 1):
        for d, t in enumerate(targets):
            m = np.bincount(coords[:, d], weights=weights, minlength=shape[d])
            weights *= _ratio(t, m)[coords[:, d]]
            if on_update is not None:
                on_update(k, d, weights)
        deviation = max(
            float(np.max(np.abs(np.bincount(coords[:, d], weights=weights, minlength=shape[d]) - t)))
            for d, t in enumerate(targets))
        if deviation < epsilon:
            return coords, weights, k, True, deviation
    return coords, weights, max_iterations, False, deviation


def ipf_product(targets, max_iterations, epsilon, on_update: Callable | None = None):
    """Run IPF from the uniform seed in product form. Returns (factors, iterations, converged, deviation)."""
    factors = [np.where(t > 0, 1.0 / len(t), 0.0) for t in targets]
    norm = math.prod(float(f.sum()) for f in factors)
    factors[0] = factors[0] / norm
    deviation = math.inf
    for k in range(1, max_iterations + 1):
        for d, t in enumerate(targets):
            factors[d] = factors[d] * _ratio(t, _product_marginal(factors, d))
            if on_update is not None:
                on_update(k, d, factors)
        deviation = max(float(np.max(np.abs(_product_marginal(factors, d) - t))) for d, t in enumerate(targets))
        if deviation < epsilon:
            return factors, k, True, deviation
    return factors, max_iterations, False, deviation


def fit_arrays(targets: Sequence, config: IpfConfig = IpfConfig(), initial=None, *,
               dimensions: Sequence[str] | None = None, categories: Sequence[Sequence[str]] | None = None,
               dense_limit: int = DENSE_CELL_LIMIT, on_update: Callable | None = None) -> JointDistribution:
    """Fit a joint distribution to target vectors.

    ``initial`` is None for the uniform seed, a dense array of the target
    shape, or a ``(coords, weights)`` pair listing nonzero seed cells.
    """
    targets = normalize_targets(targets)
    shape = tuple(len(t) for t in targets)
    dimensions = tuple(dimensions) if dimensions is not None else tuple(f"dim{d}" for d in range(len(shape)))
    if categories is None:
        categories = tuple(tuple(str(i) for i in range(n)) for n in shape)
    categories = tuple(tuple(c) for c in categories)
    meta = dict(dimensions=dimensions, categories=categories, targets=tuple(targets))

    if initial is None and math.prod(shape) > dense_limit:
        factors, k, ok, dev = ipf_product(targets, config.max_iterations, config.epsilon, on_update)
        return JointDistribution(**meta, iterations=k, converged=ok, max_deviation=dev, factors=tuple(factors))

    if initial is None:
        coords = np.indices(shape).reshape(len(shape), -1).T
        weights = np.ones(len(coords))
    elif isinstance(initial, tuple):
        coords, weights = initial
    else:
        seed = np.asarray(initial, dtype=float)
        if seed.shape != shape:
            raise DomainError(f"seed shape {seed.shape} does not match target shape {shape}")
        if np.any(seed < 0):
            raise DomainError("seed contains negative cells")
        coords = np.argwhere(seed > 0)
        weights = seed[seed > 0]
    coords, weights, k, ok, dev = ipf_cells(coords, weights, targets, config.max_iterations, config.epsilon,
                                            on_update)
    return JointDistribution(**meta, iterations=k, converged=ok, max_deviation=dev, coords=coords, weights=weights)


def ipf_fit(targets: Sequence[MarginalTable], config: IpfConfig = IpfConfig(), initial=None,
            **kwargs) -> JointDistribution:
    """Fit a joint distribution whose 1-D marginals match each table's shares.

    Each table is normalized to probabilities on its own, since census
    universes differ by dimension (persons, households, workers).
    """
    for table in targets:
        if any(c < 0 for c in table.counts):
            raise DomainError(f"{table.dimension_name}: negative count")
        if table.total <= 0:
            raise DomainError(f"{table.dimension_name}: table has no mass")
    probs = [np.asarray(t.counts, dtype=float) / t.total for t in targets]
    return fit_arrays(probs, config, initial, dimensions=[t.dimension_name for t in targets],
                      categories=[t.categories for t in targets], **kwargs)
