"""Generalized linear models with sparse gradients and the sparse DP-ERM loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse as sp
from scipy.special import expit

from . import accountant
from .errors import InvalidParameterError
from .mechanisms import NoiseSource, PrivacyBudget, SparseVector, numeric_sparse


@dataclass(frozen=True)
class Link:
    """Cumulative generating function Phi and its derivative."""

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]


LOGISTIC = Link("logistic", lambda z: np.logaddexp(0.0, z), expit)
LINKS = {"logistic": LOGISTIC}


@dataclass
class GlmModel:
    weights: np.ndarray
    link: Link = LOGISTIC

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

    @property
    def dimension(self) -> int:
        return self.weights.size

    def copy(self) -> "GlmModel":
        return GlmModel(self.weights.copy(), self.link)


def _check(model: GlmModel, x: SparseVector, y: float) -> None:
    if x.dimension != model.dimension:
        raise InvalidParameterError(
            f"feature dimension {x.dimension} != weight dimension {model.dimension}")
    if not (0.0 <= y <= 1.0):
        raise InvalidParameterError(f"label must lie in [0, 1], got {y}")


def glm_loss(model: GlmModel, x: SparseVector, y: float) -> float:
    """Phi(<x, w>) - y <x, w>."""
    _check(model, x, y)
    z = float(np.dot(x.values, model.weights[x.indices]))
    return float(model.link.phi(z)) - y * z


def glm_gradient(model: GlmModel, x: SparseVector, y: float) -> SparseVector:
    """(Phi'(<x, w>) - y) x, stored on the support of x."""
    _check(model, x, y)
    z = float(np.dot(x.values, model.weights[x.indices]))
    return SparseVector(x.dimension, x.indices, (float(model.link.dphi(z)) - y) * x.values)


@dataclass
class GroupedDataset:
    """m equally sized groups of (x, y) samples with declared sparsity bounds.

    ``c1`` bounds the support of each group's summed gradient and ``c2``
    the l-infinity norm of any per-sample gradient. Both are declared, not
    derived; :func:`verify_group_sparsity` and :func:`max_gradient_entry`
    check them empirically.
    """

    groups: list[list[tuple[SparseVector, float]]]
    c1: int
    c2: float
    _blocks: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.groups:
            raise InvalidParameterError("dataset has no groups")
        sizes = {len(g) for g in self.groups}
        if len(sizes) != 1 or 0 in sizes:
            raise InvalidParameterError(f"groups must have identical nonzero size, got sizes {sorted(sizes)}")
        dims = {x.dimension for g in self.groups for x, _ in g}
        if len(dims) != 1:
            raise InvalidParameterError("samples disagree on feature dimension")
        for g in self.groups:
            for _, y in g:
                if not (0.0 <= y <= 1.0):
                    raise InvalidParameterError(f"label must lie in [0, 1], got {y}")
        if self.c1 < 1 or self.c2 <= 0:
            raise InvalidParameterError("need c1 >= 1 and c2 > 0")
        self._blocks = [self._block(g) for g in self.groups]

    def _block(self, group):
        # dense local design matrix over the group's support union
        cols = np.unique(np.concatenate([x.indices for x, _ in group]))
        local = np.zeros((len(group), cols.size))
        for r, (x, _) in enumerate(group):
            local[r, np.searchsorted(cols, x.indices)] = x.values
        return cols, local, np.array([y for _, y in group], dtype=np.float64)

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def n(self) -> int:
        return self.m * len(self.groups[0])

    @property
    def dimension(self) -> int:
        return self.groups[0][0][0].dimension

    def samples(self) -> Iterable[tuple[SparseVector, float]]:
        for g in self.groups:
            yield from g

    def support_union_sizes(self) -> list[int]:
        return [blk[0].size for blk in self._blocks]


def group_gradient(model: GlmModel, data: GroupedDataset, i: int) -> SparseVector:
    """(m/n) times the summed per-sample gradient of group i."""
    cols, local, y = data._blocks[i]
    residual = model.link.dphi(local @ model.weights[cols]) - y
    values = (data.m / data.n) * (residual @ local)
    return SparseVector(data.dimension, cols, values)


def full_loss(model: GlmModel, data: GroupedDataset) -> float:
    total = 0.0
    for cols, local, y in data._blocks:
        z = local @ model.weights[cols]
        total += float(np.sum(model.link.phi(z) - y * z))
    return total / data.n


def max_gradient_entry(model: GlmModel, data: GroupedDataset) -> float:
    """Largest |per-sample gradient entry| at the given weights (diagnostic for c2)."""
    worst = 0.0
    for cols, local, y in data._blocks:
        residual = model.link.dphi(local @ model.weights[cols]) - y
        worst = max(worst, float(np.max(np.abs(residual[:, None] * local))))
    return worst


def verify_group_sparsity(data: GroupedDataset, probe_weights: Sequence[np.ndarray]) -> tuple[bool, int]:
    """Check the group sparsity condition at each probe point.

    Returns (max support <= c1, max support) where the support is that of
    the summed gradient of a group.
    """
    worst = 0
    for w in probe_weights:
        model = GlmModel(w)
        for i in range(data.m):
            worst = max(worst, group_gradient(model, data, i).nnz)
    return worst <= data.c1, worst


@dataclass
class ErmStep:
    step: int
    train_loss: float
    grad_support_size: int
    eps_spent: float

    def as_record(self) -> dict:
        return {"step": self.step, "train_loss": self.train_loss,
                "grad_support_size": self.grad_support_size, "eps_spent": self.eps_spent}


@dataclass
class ErmRun:
    model: GlmModel
    metrics: list[ErmStep]
    step_budget: PrivacyBudget
    total_budget: PrivacyBudget
    alpha: float
    s_inf: float


def dp_sparse_erm_train(data: GroupedDataset, model: GlmModel, total: PrivacyBudget,
                        eta: float, T: int, rng: NoiseSource, *,
                        budget_rule: str = "exact",
                        sparsifier: Callable[[SparseVector], SparseVector] | None = None,
                        group_order: Sequence[int] | None = None) -> ErmRun:
    """Sparse DP-ERM: T NumericSparse-filtered gradient steps on random groups.

    Each iteration samples a group with replacement, forms its mean gradient
    and releases it through NumericSparse with threshold
    40 c2 m (ln p + ln(4 c1 n)) sqrt(c1 ln(2/delta')) / (n eps') and
    l-infinity sensitivity 2 c2 m / n.

    ``budget_rule="closed_form"`` uses the closed-form per-step budget, whose
    composed total is about half of ``total.epsilon``; ``"exact"`` (default)
    solves for the per-step epsilon that composes to ``total``.

    ``sparsifier`` and ``group_order`` replace the private release and the
    random group picks; they exist for noise-free testing.
    """
    if eta < 0:
        raise InvalidParameterError("learning rate must be nonnegative")
    m, n, p = data.m, data.n, data.dimension
    if model.dimension != p:
        raise InvalidParameterError("model and data dimensions differ")
    if budget_rule == "closed_form":
        step_budget = accountant.sparse_erm_step_budget(total, T, m)
    elif budget_rule == "exact":
        step_budget = accountant.sparse_erm_exact_step_budget(total, T, m)
    else:
        raise InvalidParameterError(f"unknown budget rule {budget_rule!r}")
    total_spent = accountant.erm_total_budget(step_budget, T, m, total.delta / 2)
    per_iter = accountant.amplify_by_sampling(step_budget, 1.0 / m)
    alpha = accountant.erm_alpha(data.c2, m, n, p, data.c1, step_budget)
    s_inf = 2 * data.c2 * m / n

    picker = rng.spawn(0)
    noise = rng.spawn(1)
    model = model.copy()
    metrics = []
    for t in range(T):
        i = int(group_order[t]) if group_order is not None else int(picker.rng.integers(m))
        grad = group_gradient(model, data, i)
        if sparsifier is None:
            delta_t = numeric_sparse(grad, alpha, data.c1, step_budget, s_inf, noise)
        else:
            delta_t = sparsifier(grad)
        if delta_t.indices.size:
            model.weights[delta_t.indices] -= eta * delta_t.values
        spent = accountant.strong_compose(
            accountant.CompositionPlan(per_iter, t + 1, total.delta / 2)).epsilon
        metrics.append(ErmStep(t + 1, full_loss(model, data), delta_t.nnz, spent))
    return ErmRun(model, metrics, step_budget, total_spent, alpha, s_inf)


# -- file formats -----------------------------------------------------------

def load_grouped_dataset(path, dimension: int, c1: int, c2: float) -> GroupedDataset:
    """Read ``group-id label idx:value ...`` lines; groups are ordered by first appearance."""
    groups: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise InvalidParameterError(f"{path}:{lineno}: expected group id and label")
            pairs = sorted((int(k), float(v)) for k, v in (tok.split(":") for tok in parts[2:]))
            x = SparseVector(dimension, [k for k, _ in pairs], [v for _, v in pairs])
            groups.setdefault(parts[0], []).append((x, float(parts[1])))
    sizes = {len(g) for g in groups.values()}
    if len(sizes) > 1:
        n = sum(len(g) for g in groups.values())
        raise InvalidParameterError(f"n={n} samples cannot be split evenly into m={len(groups)} groups")
    return GroupedDataset(list(groups.values()), c1, c2)


def save_grouped_dataset(data: GroupedDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for gid, group in enumerate(data.groups):
            for x, y in group:
                feats = " ".join(f"{i}:{v!r}" for i, v in zip(x.indices.tolist(), x.values.tolist()))
                fh.write(f"{gid} {y!r} {feats}\n")


def write_erm_metrics(metrics: Sequence[ErmStep], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec.as_record()) + "\n")


# -- synthetic data ----------------------------------------------------------

def synthetic_grouped_logistic(p: int, c1: int, m: int, n: int, rng: NoiseSource,
                               weight_scale: float = 1.0) -> tuple[GroupedDataset, np.ndarray]:
    """Logistic data where every sample of a group shares one c1-subset of features.

    Features are uniform in [-1, 1], so per-sample gradient entries are
    bounded by c2 = 1.
    """
    if n % m:
        raise InvalidParameterError("n must be divisible by m")
    g = rng.rng
    w_true = g.normal(0.0, weight_scale, size=p)
    groups = []
    for _ in range(m):
        support = np.sort(g.choice(p, size=c1, replace=False))
        group = []
        for _ in range(n // m):
            vals = g.uniform(-1.0, 1.0, size=c1)
            y = float(g.random() < expit(vals @ w_true[support]))
            group.append((SparseVector(p, support, vals), y))
        groups.append(group)
    return GroupedDataset(groups, c1, 1.0), w_true


def csr_from_samples(samples: Sequence[SparseVector]) -> sp.csr_matrix:
    indptr = np.cumsum([0] + [x.indices.size for x in samples])
    return sp.csr_matrix((np.concatenate([x.values for x in samples]),
                          np.concatenate([x.indices for x in samples]), indptr),
                         shape=(len(samples), samples[0].dimension))


def erm_expected_steps(m: int, n: int) -> int:
    """Iteration count max(m^2/100, n) used by the utility analysis."""
    return max(math.ceil(m * m / 100), n)


class GlmOracle:
    """Per-sample GLM gradients over a CSR design matrix, for the generic trainer."""

    def __init__(self, X, y, link: Link = LOGISTIC):
        self.X = sp.csr_matrix(X, dtype=np.float64)
        self.X.sort_indices()
        self.y = np.asarray(y, dtype=np.float64)
        self.link = link
        self.num_samples, self.dimension = self.X.shape

    def per_sample_gradients(self, params: np.ndarray, batch: np.ndarray) -> list[SparseVector]:
        X, ptr = self.X, self.X.indptr
        z = X[batch] @ params
        resid = self.link.dphi(z) - self.y[batch]
        out = []
        for r, i in zip(resid, batch):
            lo, hi = ptr[i], ptr[i + 1]
            out.append(SparseVector(self.dimension, X.indices[lo:hi], r * X.data[lo:hi]))
        return out

    def loss(self, params: np.ndarray, batch: np.ndarray | None = None) -> float:
        X, y = (self.X, self.y) if batch is None else (self.X[batch], self.y[batch])
        z = X @ params
        return float(np.mean(self.link.phi(z) - y * z))


def synthetic_sparse_logistic(p: int, support: int, n: int, rng: NoiseSource,
                              informative: int | None = None, weight_scale: float = 2.0):
    """Logistic task with ``support`` active features per sample.

    Only ``informative`` coordinates carry nonzero true weight. Returns
    (csr design matrix, labels, true weights).
    """
    g = rng.rng
    w_true = np.zeros(p)
    k = p if informative is None else informative
    w_true[g.choice(p, size=k, replace=False)] = g.normal(0.0, weight_scale, size=k)
    cols = np.sort(np.argsort(g.random((n, p)), axis=1)[:, :support], axis=1)
    vals = g.uniform(-1.0, 1.0, size=(n, support))
    X = sp.csr_matrix((vals.ravel(), cols.ravel(), np.arange(0, n * support + 1, support)), shape=(n, p))
    y = (g.random(n) < expit(X @ w_true)).astype(np.float64)
    return X, y, w_true
