"""Randomized DP primitives: noise sources, NumericSparse, private top-k selection.

Everything here is a deterministic function of its inputs and an explicit
:class:`NoiseSource`. Logarithms are natural logarithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BudgetOutOfRangeError,
    EmptySelectionError,
    InvalidParameterError,
    InvariantViolation,
)

_TWO_53 = float(2**53)

# Share of the NumericSparse budget spent on threshold comparisons; the rest
# perturbs the released values.
THRESHOLD_SHARE = 0.95


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon >= 0):
            raise InvalidParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (0.0 <= self.delta <= 1.0):
            raise InvalidParameterError(f"delta must lie in [0, 1], got {self.delta}")

    def __iter__(self):
        yield self.epsilon
        yield self.delta


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Index/value pairs over a declared dimension.

    ``indices`` are strictly increasing. Stored entries may hold explicit
    zeros; :attr:`nnz` counts only the nonzero ones.
    """

    dimension: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.dimension < 1:
            raise InvalidParameterError("dimension must be positive")
        if idx.shape != val.shape:
            raise InvalidParameterError("indices and values differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dimension:
                raise InvalidParameterError("index out of range")
            if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
                raise InvalidParameterError("indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        idx = np.flatnonzero(x)
        return cls(x.size, idx, x[idx])

    @classmethod
    def zeros(cls, dimension: int) -> "SparseVector":
        return cls(dimension, np.empty(0, np.int64), np.empty(0))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.values
        return out

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def support(self) -> np.ndarray:
        return self.indices[self.values != 0]

    def norm(self) -> float:
        return math.sqrt(float(np.dot(self.values, self.values)))

    def scaled(self, factor: float) -> "SparseVector":
        return SparseVector(self.dimension, self.indices, self.values * factor)

    def __len__(self):
        return self.dimension

    def __repr__(self):
        return f"SparseVector(dimension={self.dimension}, nnz={self.nnz})"


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """Sorted set of selected coordinates with a cardinality cap."""

    dimension: int
    selected: np.ndarray
    cap: int

    def __post_init__(self):
        sel = np.unique(np.asarray(self.selected, dtype=np.int64))
        if sel.size > self.cap:
            raise InvariantViolation(
                f"mask holds {sel.size} indices, cap is {self.cap}")
        if sel.size and (sel[0] < 0 or sel[-1] >= self.dimension):
            raise InvariantViolation("mask index out of range")
        object.__setattr__(self, "selected", sel)

    def __len__(self):
        return int(self.selected.size)

    def to_bool(self) -> np.ndarray:
        out = np.zeros(self.dimension, dtype=bool)
        out[self.selected] = True
        return out


class NoiseSource:
    """Seeded pseudo-random stream.

    Two sources built from the same seed and queried with the same call
    sequence return identical values. ``spawn`` derives independent child
    streams keyed by integers, so that e.g. batch sampling and noise draws
    do not perturb each other.
    """

    def __init__(self, seed: int = 0, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.rng = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, *keys: int) -> "NoiseSource":
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(keys))
        return NoiseSource(self.seed, _seq=seq)

    def open_uniform(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        k = self.rng.integers(0, 2**53, size=size, dtype=np.int64)
        return (k + 0.5) / _TWO_53

    def laplace(self, scale: float, size=None):
        return laplace_sample(scale, self, size=size)

    def gaussian(self, scale: float, size=None):
        return self.rng.normal(0.0, scale, size=size)


def _as_rng(rng) -> NoiseSource:
    if isinstance(rng, NoiseSource):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return NoiseSource(0 if rng is None else int(rng))
    raise TypeError("rng must be a NoiseSource or an integer seed")


def laplace_sample(scale: float, rng: NoiseSource, size=None):
    """Draw from Laplace(0, scale) by inverting the CDF of an open uniform."""
    if not scale > 0:
        raise InvalidParameterError(f"Laplace scale must be positive, got {scale}")
    q = _as_rng(rng).open_uniform(size)
    # F^-1(q) = b ln(2q) for q < 1/2, -b ln(2(1-q)) otherwise
    out = np.where(q < 0.5, np.log(2.0 * q), -np.log(2.0 * (1.0 - q))) * scale
    return float(out) if size is None else out


def gaussian_sigma(l2_sensitivity: float, budget: PrivacyBudget) -> float:
    """Noise standard deviation sqrt(2 ln(1.25/delta)) * s2 / eps."""
    eps, delta = budget
    if not (0 < eps <= 1):
        raise BudgetOutOfRangeError(
            f"Gaussian mechanism needs 0 < epsilon <= 1, got {eps}")
    if not (0 < delta < 1):
        raise BudgetOutOfRangeError(
            f"Gaussian mechanism needs 0 < delta < 1, got {delta}")
    if not l2_sensitivity > 0:
        raise InvalidParameterError("l2 sensitivity must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * l2_sensitivity / eps


def gaussian_mechanism(v, l2_sensitivity: float, budget: PrivacyBudget,
                       rng: NoiseSource) -> np.ndarray:
    """Release ``v + N(0, sigma^2 I)``; every coordinate is perturbed."""
    sigma = gaussian_sigma(l2_sensitivity, budget)
    dense = v.to_dense() if isinstance(v, SparseVector) else np.asarray(v, dtype=float)
    return dense + _as_rng(rng).gaussian(sigma, size=dense.shape)


def numeric_sparse_sigma(s_inf: float, c1: int, epsilon: float, delta: float) -> float:
    """Laplace scale unit s * sqrt(32 c1 ln(2/delta)) / eps."""
    return s_inf * math.sqrt(32.0 * c1 * math.log(2.0 / delta)) / epsilon


class SparseScan(NamedTuple):
    """Full outcome of one NumericSparse pass."""

    answer: SparseVector
    answered: np.ndarray
    stopped_at: int | None


def numeric_sparse_scan(u, alpha: float, c1: int, budget: PrivacyBudget,
                        s_inf: float, rng: NoiseSource) -> SparseScan:
    """NumericSparse with its bookkeeping exposed.

    ``stopped_at`` is the index at which the answer count reached ``c1``
    (the scan stops there), or None if the whole vector was scanned.

    Noise is pre-drawn in a fixed order (all comparison noises in index
    order, then the c1 + 1 threshold draws, then the c1 value draws), which
    is distributionally identical to drawing lazily during the scan.
    """
    if int(c1) != c1 or c1 < 1:
        raise InvalidParameterError(f"c1 must be a positive integer, got {c1}")
    if not alpha > 0:
        raise InvalidParameterError(f"threshold alpha must be positive, got {alpha}")
    if not s_inf > 0:
        raise InvalidParameterError(f"sensitivity must be positive, got {s_inf}")
    eps, delta = budget
    if not eps > 0 or not (0 < delta < 1):
        raise BudgetOutOfRangeError("NumericSparse needs epsilon > 0 and 0 < delta < 1")
    c1 = int(c1)
    dense = u.to_dense() if isinstance(u, SparseVector) else np.asarray(u, dtype=float)
    p = dense.size
    rng = _as_rng(rng)

    sigma1 = numeric_sparse_sigma(s_inf, c1, THRESHOLD_SHARE * eps, delta)
    sigma2 = numeric_sparse_sigma(s_inf, c1, (1 - THRESHOLD_SHARE) * eps, delta)
    comparison = np.abs(dense) + laplace_sample(2 * sigma1, rng, size=p)
    thresholds = alpha + laplace_sample(sigma1, rng, size=c1 + 1)
    value_noise = laplace_sample(2 * sigma2, rng, size=c1)

    answered = []
    start, count, stopped = 0, 0, None
    while start < p:
        hits = np.flatnonzero(comparison[start:] >= thresholds[count])
        if hits.size == 0:
            break
        i = start + int(hits[0])
        answered.append(i)
        count += 1
        if count >= c1:
            stopped = i
            break
        start = i + 1

    idx = np.asarray(answered, dtype=np.int64)
    vals = dense[idx] + value_noise[:count]
    return SparseScan(SparseVector(p, idx, vals), idx, stopped)


def numeric_sparse(u, alpha: float, c1: int, budget: PrivacyBudget,
                   s_inf: float, rng: NoiseSource) -> SparseVector:
    """Privately report at most ``c1`` coordinates of ``u`` above ``alpha``.

    Coordinates are scanned in index order; ``|u_i|`` plus Laplace noise is
    compared with a noisy threshold that is redrawn after every answer, and
    answered coordinates are released with independent Laplace noise. The
    scan stops as soon as ``c1`` coordinates have been answered.
    """
    return numeric_sparse_scan(u, alpha, c1, budget, s_inf, rng).answer


def selection_size(p: int, gamma: float) -> int:
    k = int(math.floor(gamma * p))
    if k < 1:
        raise EmptySelectionError(f"floor(gamma * p) = floor({gamma} * {p}) is zero")
    if k > p:
        raise InvalidParameterError("gamma must not exceed 1")
    return k


def per_draw_epsilon(epsilon: float, delta: float, k: int) -> float:
    """eps'' = eps' / sqrt(2 k ln(1/delta')): budget of each of the k draws."""
    return epsilon / math.sqrt(2.0 * k * math.log(1.0 / delta))


def exp_select_topk(g, gamma: float, budget: PrivacyBudget, s0: float,
                    rng: NoiseSource, method: str = "sequential") -> SelectionMask:
    """Choose floor(gamma p) coordinates with the exponential mechanism.

    Scores are ``|g_k|`` clipped to ``s0``; each of the k draws without
    replacement picks index k with probability proportional to
    ``exp(eps'' |g_k| / (2 s0))``.

    ``method="gumbel"`` uses the Gumbel-top-k construction, which has the
    same distribution over ordered draws in O(p) time instead of O(k p).
    """
    g = np.asarray(g.to_dense() if isinstance(g, SparseVector) else g, dtype=float)
    p = g.size
    k = selection_size(p, gamma)
    eps, delta = budget
    if not (0 < delta < 1):
        raise BudgetOutOfRangeError(f"selection delta must lie in (0, 1), got {delta}")
    if not s0 > 0:
        raise InvalidParameterError("s0 must be positive")
    rng = _as_rng(rng)
    scores = per_draw_epsilon(eps, delta, k) * np.minimum(np.abs(g), s0) / (2.0 * s0)

    if method == "gumbel":
        keys = scores - np.log(-np.log(rng.open_uniform(p)))
        chosen = np.argpartition(-keys, k - 1)[:k] if k < p else np.arange(p)
        return SelectionMask(p, chosen, k)
    if method != "sequential":
        raise InvalidParameterError(f"unknown method {method!r}")

    weights = np.exp(scores - scores.max())
    chosen = np.empty(k, dtype=np.int64)
    for t in range(k):
        cdf = np.cumsum(weights)
        i = int(np.searchsorted(cdf, rng.rng.random() * cdf[-1], side="right"))
        i = min(i, p - 1)
        if weights[i] == 0:
            # rounding at the right edge can land on a removed index
            live = np.flatnonzero(weights)
            i = int(live[min(np.searchsorted(live, i), live.size - 1)])
        chosen[t] = i
        weights[i] = 0.0
    return SelectionMask(p, chosen, k)


def uniform_select(p: int, gamma: float, rng: NoiseSource) -> SelectionMask:
    """Uniformly random floor(gamma p)-subset of range(p); data independent."""
    k = selection_size(p, gamma)
    if k == p:
        return SelectionMask(p, np.arange(p), k)
    return SelectionMask(p, _as_rng(rng).rng.choice(p, size=k, replace=False), k)


def sparse_vector_select(g, alpha: float, c1: int, budget: PrivacyBudget,
                         s_inf: float, rng: NoiseSource, s0: float | None = None) -> SelectionMask:
    """Mask of the coordinates NumericSparse answers; released values are dropped.

    With ``s0`` the scores are first clipped to ``[-s0, s0]``.
    """
    g = np.asarray(g.to_dense() if isinstance(g, SparseVector) else g, dtype=float)
    if s0 is not None:
        g = np.clip(g, -s0, s0)
    scan = numeric_sparse_scan(g, alpha, c1, budget, s_inf, rng)
    return SelectionMask(g.size, scan.answered, int(c1))


__all__ = [
    "PrivacyBudget", "SparseVector", "SelectionMask", "NoiseSource", "SparseScan",
    "laplace_sample", "gaussian_sigma", "gaussian_mechanism", "numeric_sparse",
    "numeric_sparse_scan", "numeric_sparse_sigma", "exp_select_topk", "uniform_select",
    "sparse_vector_select", "selection_size", "per_draw_epsilon",
]
