"""DP training with sparse gradients, plus DP-SGD and non-private baselines.

One step of the sparse trainer:

1. per-sample gradients clipped to l2 norm ``s1`` and summed, divided by
   the expected batch size ``b`` (never the realized one);
2. a private selection picks a mask ``M``;
3. the masked gradient is clipped to l2 norm ``s2``;
4. Gaussian noise with std ``sigma * min(s1/b, s2)`` is added on the masked
   coordinates only, and only those coordinates are updated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from . import accountant
from .errors import InvalidParameterError, InvariantViolation
from .mechanisms import (
    NoiseSource,
    PrivacyBudget,
    SelectionMask,
    SparseVector,
    exp_select_topk,
    selection_size,
    sparse_vector_select,
    uniform_select,
)

logger = logging.getLogger(__name__)

MODES = ("non_private", "dp_sgd", "sparse_exp", "sparse_sv", "sparse_uniform")
_SELECTION_FOR_MODE = {"sparse_exp": "exponential", "sparse_sv": "sparse_vector",
                       "sparse_uniform": "uniform"}


@dataclass(frozen=True)
class ClipSpec:
    s1: float = 15.0
    s2: float = 1.0
    s0: float = 0.1

    def __post_init__(self):
        if not (self.s1 > 0 and self.s2 > 0 and self.s0 > 0):
            raise InvalidParameterError("clipping bounds must be positive")


@dataclass(frozen=True)
class SelectionStrategy:
    """Which private selection builds the mask.

    ``budget`` is the per-step (eps', delta'). ``alpha`` and ``c1`` only
    apply to the sparse-vector kind; ``c1`` defaults to floor(gamma p).
    """

    kind: str = "exponential"
    budget: PrivacyBudget | None = PrivacyBudget(1.0, 1e-8)
    alpha: float | None = None
    c1: int | None = None
    method: str = "sequential"

    def __post_init__(self):
        if self.kind not in ("exponential", "sparse_vector", "uniform"):
            raise InvalidParameterError(f"unknown selection kind {self.kind!r}")
        if self.kind != "uniform":
            if self.budget is None or not (0 < self.budget.delta < 1):
                raise InvalidParameterError(f"{self.kind} selection needs a budget with 0 < delta < 1")
        if self.kind == "sparse_vector" and not (self.alpha and self.alpha > 0):
            raise InvalidParameterError("sparse-vector selection needs a positive threshold alpha")

    @property
    def epsilon(self) -> float:
        return 0.0 if self.kind == "uniform" or self.budget is None else self.budget.epsilon


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the reference settings for the 100K-parameter model."""

    batch_size: int = 20
    learning_rate: float = 0.001
    epochs: int = 20
    noise_multiplier: float = 0.5
    gamma: float = 0.001
    clip: ClipSpec = field(default_factory=ClipSpec)
    selection: SelectionStrategy = field(default_factory=SelectionStrategy)
    delta_prime: float = 1e-8
    seed: int = 0
    optimizer: str = "sgd"
    clip_non_private: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidParameterError("need batch_size >= 1 and epochs >= 0")
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning rate must be positive")
        if self.noise_multiplier < 0:
            raise InvalidParameterError("noise multiplier must be nonnegative")
        if not (0 < self.gamma <= 1):
            raise InvalidParameterError("gamma must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidParameterError("optimizer must be 'sgd' or 'adam'")


class GradientOracle(Protocol):
    """Model + data: per-sample gradients and mean loss over sample indices."""

    dimension: int
    num_samples: int

    def per_sample_gradients(self, params: np.ndarray, batch: np.ndarray) -> list[SparseVector]: ...

    def loss(self, params: np.ndarray, batch: np.ndarray | None = None) -> float: ...


class StepStreams(NamedTuple):
    selection: NoiseSource
    noise: NoiseSource


def _streams(rng) -> StepStreams:
    if isinstance(rng, StepStreams):
        return rng
    # a single source serves both stages; successive calls keep advancing it
    return StepStreams(rng, rng)


@dataclass
class StepMetrics:
    grad_norm: float
    delta_norm: float
    mask_size: int
    noise_std: float


# -- building blocks --------------------------------------------------------

def clip_l2(g: SparseVector, bound: float) -> SparseVector:
    """g / max(1, ||g|| / bound); zero stays zero."""
    if not bound > 0:
        raise InvalidParameterError("clipping bound must be positive")
    return SparseVector(g.dimension, g.indices, g.values / max(1.0, g.norm() / bound))


def _clip_dense(v: np.ndarray, bound: float) -> np.ndarray:
    return v / max(1.0, math.sqrt(float(np.dot(v, v))) / bound)


def poisson_batch(n: int, rate: float, rng: NoiseSource) -> np.ndarray:
    """Include each of range(n) independently with probability ``rate``."""
    if not (0 < rate <= 1):
        raise InvalidParameterError("sampling rate must lie in (0, 1]")
    if rate == 1:
        return np.arange(n)
    return np.flatnonzero(rng.rng.random(n) < rate)


def clipped_mean_gradient(grads: Sequence[SparseVector], s1: float, b: int, p: int) -> np.ndarray:
    """Sum of per-sample gradients clipped to ``s1``, divided by ``b``."""
    acc = np.zeros(p)
    for g in grads:
        acc[g.indices] += g.values / max(1.0, g.norm() / s1)
    return acc / b


def noise_std(cfg: TrainConfig) -> float:
    if cfg.noise_multiplier == 0:
        return 0.0
    return cfg.noise_multiplier * min(cfg.clip.s1 / cfg.batch_size, cfg.clip.s2)


def select(g_hat: np.ndarray, cfg: TrainConfig, rng: NoiseSource) -> SelectionMask:
    strategy = cfg.selection
    p = g_hat.size
    if strategy.kind == "uniform":
        mask = uniform_select(p, cfg.gamma, rng)
        cap = selection_size(p, cfg.gamma)
    elif strategy.kind == "exponential":
        mask = exp_select_topk(g_hat, cfg.gamma, strategy.budget, cfg.clip.s0, rng,
                               method=strategy.method)
        cap = selection_size(p, cfg.gamma)
    else:
        cap = strategy.c1 or selection_size(p, cfg.gamma)
        s_inf = min(2 * cfg.clip.s1 / cfg.batch_size, 2 * cfg.clip.s0)
        mask = sparse_vector_select(g_hat, strategy.alpha, cap, strategy.budget, s_inf, rng,
                                    s0=cfg.clip.s0)
    if len(mask) > cap:
        raise InvariantViolation(f"selection returned {len(mask)} coordinates, cap is {cap}")
    return mask


class SgdUpdate:
    """w[idx] -= lr * u."""

    def __init__(self, lr: float):
        self.lr = lr

    def apply(self, params: np.ndarray, idx, update: np.ndarray) -> None:
        params[idx] -= self.lr * update


class LazyAdamUpdate:
    """Adam whose moments and parameters change only on the updated coordinates.

    Applied to the already privatized update, so it is post-processing.
    """

    def __init__(self, lr: float, dimension: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(dimension)
        self.v = np.zeros(dimension)
        self.t = np.zeros(dimension, dtype=np.int64)

    def apply(self, params: np.ndarray, idx, update: np.ndarray) -> None:
        if isinstance(idx, slice):
            idx = np.arange(params.size)[idx]
        self.t[idx] += 1
        self.m[idx] = self.beta1 * self.m[idx] + (1 - self.beta1) * update
        self.v[idx] = self.beta2 * self.v[idx] + (1 - self.beta2) * update * update
        t = self.t[idx]
        m_hat = self.m[idx] / (1 - self.beta1 ** t)
        v_hat = self.v[idx] / (1 - self.beta2 ** t)
        params[idx] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_update_rule(cfg: TrainConfig, dimension: int):
    if cfg.optimizer == "adam":
        return LazyAdamUpdate(cfg.learning_rate, dimension)
    return SgdUpdate(cfg.learning_rate)


# -- steps ------------------------------------------------------------------

def dp_sparse_step(params: np.ndarray, batch: np.ndarray, oracle: GradientOracle,
                   cfg: TrainConfig, rng, update_rule=None) -> tuple[np.ndarray, StepMetrics]:
    """One step of the two-clipping sparse DP optimizer; returns new params."""
    streams = _streams(rng)
    p = params.size
    grads = oracle.per_sample_gradients(params, batch)
    g_hat = clipped_mean_gradient(grads, cfg.clip.s1, cfg.batch_size, p)
    mask = select(g_hat, cfg, streams.selection)
    delta = g_hat[mask.selected]
    delta_hat = _clip_dense(delta, cfg.clip.s2)
    std = noise_std(cfg)
    # noise on the masked coordinates only; identical to full noise then masking
    noisy = delta_hat + streams.noise.gaussian(std, size=delta_hat.size) if std > 0 else delta_hat
    new = params.copy()
    (update_rule or SgdUpdate(cfg.learning_rate)).apply(new, mask.selected, noisy)
    metrics = StepMetrics(float(np.linalg.norm(g_hat)), float(np.linalg.norm(delta)), len(mask), std)
    return new, metrics


def dp_sgd_step(params: np.ndarray, batch: np.ndarray, oracle: GradientOracle,
                cfg: TrainConfig, rng, update_rule=None) -> tuple[np.ndarray, StepMetrics]:
    """Standard DP-SGD: clip at s1, average by b, perturb every coordinate."""
    streams = _streams(rng)
    p = params.size
    grads = oracle.per_sample_gradients(params, batch)
    g_hat = clipped_mean_gradient(grads, cfg.clip.s1, cfg.batch_size, p)
    std = 0.0 if cfg.noise_multiplier == 0 else cfg.noise_multiplier * cfg.clip.s1 / cfg.batch_size
    noisy = g_hat + streams.noise.gaussian(std, size=p) if std > 0 else g_hat
    new = params.copy()
    (update_rule or SgdUpdate(cfg.learning_rate)).apply(new, slice(None), noisy)
    gn = float(np.linalg.norm(g_hat))
    return new, StepMetrics(gn, gn, p, std)


def sgd_step(params: np.ndarray, batch: np.ndarray, oracle: GradientOracle,
             cfg: TrainConfig, rng=None, update_rule=None) -> tuple[np.ndarray, StepMetrics]:
    """Non-private mini-batch step (optionally with the s1 clip)."""
    p = params.size
    grads = oracle.per_sample_gradients(params, batch)
    s1 = cfg.clip.s1 if cfg.clip_non_private else math.inf
    g_hat = clipped_mean_gradient(grads, s1, cfg.batch_size, p)
    new = params.copy()
    (update_rule or SgdUpdate(cfg.learning_rate)).apply(new, slice(None), g_hat)
    gn = float(np.linalg.norm(g_hat))
    return new, StepMetrics(gn, gn, p, 0.0)


# -- training loop -------------------------------------------------------------

def config_for_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    """Force the selection kind that a sparse mode implies."""
    if mode not in MODES:
        raise InvalidParameterError(f"unknown mode {mode!r}; choose from {MODES}")
    kind = _SELECTION_FOR_MODE.get(mode)
    if kind is None or cfg.selection.kind == kind:
        return cfg
    return replace(cfg, selection=replace(cfg.selection, kind=kind))


def budget_report(cfg: TrainConfig, mode: str, n: int) -> PrivacyBudget | None:
    """Accounted (eps, delta) of a full run; None for non-private training.

    Sparse modes use the total-budget bound of the sparse trainer with the
    selection epsilon (zero for uniform selection). DP-SGD is reported
    through the same bound with no selection cost.
    """
    if mode == "non_private":
        return None
    T = cfg.epochs * (n // cfg.batch_size)
    eps_sel = config_for_mode(cfg, mode).selection.epsilon if mode != "dp_sgd" else 0.0
    sigma = cfg.noise_multiplier if cfg.noise_multiplier > 0 else 0.0
    if sigma == 0:
        raise accountant.AssumptionViolatedError("a DP mode needs a positive noise multiplier")
    return accountant.sparse_sgd_total_budget(eps_sel, cfg.delta_prime, sigma,
                                              cfg.batch_size, n, max(T, 1))


@dataclass
class TrainResult:
    params: np.ndarray
    history: list[dict]
    budget: PrivacyBudget | None
    steps: int


def train(oracle: GradientOracle, params: np.ndarray, cfg: TrainConfig, mode: str,
          eval_oracle: GradientOracle | None = None, *, check_budget: bool = True,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``epochs * (n // b)`` steps of the chosen mode with Poisson batches.

    The full training loss and (if given) the held-out loss are recorded
    before training and after each epoch.
    """
    cfg = config_for_mode(cfg, mode)
    n = oracle.num_samples
    b = cfg.batch_size
    if b > n:
        raise InvalidParameterError("batch size exceeds dataset size")
    budget = budget_report(cfg, mode, n) if check_budget else None
    step_fn = {"non_private": sgd_step, "dp_sgd": dp_sgd_step}.get(mode, dp_sparse_step)

    root = NoiseSource(cfg.seed)
    batches = root.spawn(0)
    streams = StepStreams(root.spawn(1), root.spawn(2))
    rule = make_update_rule(cfg, oracle.dimension)
    params = np.array(params, dtype=np.float64, copy=True)
    eps_total = None if budget is None else budget.epsilon
    delta_total = None if budget is None else budget.delta

    def record(epoch, mask_sizes):
        rec = {"epoch": epoch,
               "train_loss": oracle.loss(params),
               "test_loss": eval_oracle.loss(params) if eval_oracle is not None else None,
               "eps_total": eps_total, "delta_total": delta_total,
               "mean_mask_size": float(np.mean(mask_sizes)) if mask_sizes else 0.0}
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        logger.info("epoch %d train %.5f", epoch, rec["train_loss"])

    history: list[dict] = []
    record(0, [])
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        sizes = []
        for _ in range(n // b):
            batch = poisson_batch(n, b / n, batches)
            params, m = step_fn(params, batch, oracle, cfg, streams, rule)
            sizes.append(m.mask_size)
            steps += 1
        record(epoch, sizes)
    return TrainResult(params, history, budget, steps)
