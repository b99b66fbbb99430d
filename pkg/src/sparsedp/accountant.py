"""Privacy arithmetic: amplification, strong composition and the trainers' budgets.

All functions are pure. When a hypothesis of the underlying bound fails the
function raises :class:`AssumptionViolatedError` rather than returning a
number that could understate the privacy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import brentq

from .errors import AssumptionViolatedError, InvalidParameterError
from .mechanisms import PrivacyBudget


@dataclass(frozen=True)
class CompositionPlan:
    per_step: PrivacyBudget
    steps: int
    slack_delta: float

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidParameterError(f"steps must be a positive integer, got {self.steps}")
        if not (0 < self.slack_delta < 1):
            raise InvalidParameterError(f"slack delta must lie in (0, 1), got {self.slack_delta}")


@dataclass(frozen=True)
class SamplingRate:
    gamma: float

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise InvalidParameterError(f"sampling rate must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class SensitivityBound:
    norm: str
    value: float

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise InvalidParameterError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if not self.value >= 0:
            raise InvalidParameterError("sensitivity must be nonnegative")


def amplify_by_sampling(base: PrivacyBudget, rate: SamplingRate | float) -> PrivacyBudget:
    """(eps, delta) run on a uniform gamma-fraction of the data is (gamma eps, gamma delta)-DP.

    Only valid for eps <= 1.
    """
    gamma = rate.gamma if isinstance(rate, SamplingRate) else SamplingRate(rate).gamma
    if base.epsilon > 1:
        raise AssumptionViolatedError(
            f"amplification by sampling requires epsilon <= 1, got {base.epsilon}")
    return PrivacyBudget(gamma * base.epsilon, gamma * base.delta)


def strong_compose(plan: CompositionPlan) -> PrivacyBudget:
    """k-fold adaptive composition: k eps (e^eps - 1) + eps sqrt(2 k ln(1/slack)), k delta + slack."""
    eps, delta = plan.per_step
    k = plan.steps
    eps_total = k * eps * math.expm1(eps) + eps * math.sqrt(2 * k * math.log(1 / plan.slack_delta))
    return PrivacyBudget(eps_total, min(1.0, k * delta + plan.slack_delta))


def check_erm_iterations(T: int, m: int) -> None:
    if int(T) != T or T < 1 or int(m) != m or m < 1:
        raise InvalidParameterError("T and m must be positive integers")
    if m > 10 * math.sqrt(T):
        raise AssumptionViolatedError(
            f"sparse DP-ERM privacy requires m <= 10 sqrt(T); got m={m}, T={T}")


def sparse_erm_step_budget(total: PrivacyBudget, T: int, m: int) -> PrivacyBudget:
    """Per-iteration NumericSparse budget of the sparse DP-ERM loop.

    eps' = eps m / (2 sqrt(2 T ln(2/delta))), delta' = delta m / (2 T).
    """
    check_erm_iterations(T, m)
    eps, delta = total
    if not (0 < delta < 1):
        raise InvalidParameterError("total delta must lie in (0, 1)")
    return PrivacyBudget(eps * m / (2 * math.sqrt(2 * T * math.log(2 / delta))),
                         delta * m / (2 * T))


def erm_total_budget(step: PrivacyBudget, T: int, m: int, slack_delta: float) -> PrivacyBudget:
    """Total of T group-sampled NumericSparse calls (amplify by 1/m, then compose)."""
    check_erm_iterations(T, m)
    per_iter = amplify_by_sampling(step, SamplingRate(1.0 / m))
    return strong_compose(CompositionPlan(per_iter, T, slack_delta))


def sparse_erm_exact_step_budget(total: PrivacyBudget, T: int, m: int) -> PrivacyBudget:
    """Per-iteration budget whose amplified T-fold composition spends exactly ``total``.

    The closed-form budget composes to roughly half of the requested
    epsilon. This variant keeps its delta' and solves numerically for the
    largest eps' <= 1 (the domain of the amplification bound) whose composed total
    does not exceed ``total.epsilon``; when even eps' = 1 falls short, eps' = 1
    is returned and the composed total is below the request.
    """
    closed = sparse_erm_step_budget(total, T, m)
    slack = total.delta / 2

    def excess(eps_step):
        return erm_total_budget(PrivacyBudget(eps_step, closed.delta), T, m, slack).epsilon - total.epsilon

    if excess(1.0) <= 0:
        return PrivacyBudget(1.0, closed.delta)
    eps_step = brentq(excess, 0.0, 1.0, xtol=1e-300, rtol=4 * 2.0**-52)
    # land on the feasible side of the root
    while excess(eps_step) > 0:
        eps_step = math.nextafter(eps_step, 0.0)
    return PrivacyBudget(eps_step, closed.delta)


def gaussian_step_epsilon(sigma: float, delta_prime: float) -> float:
    """Epsilon of the masked Gaussian step: 2 sqrt(2 ln(1.25/delta')) / sigma.

    Noise std is sigma * min(S1/b, S2) against an l2 sensitivity of
    2 min(S1/b, S2), so the ratio is sigma / 2.
    """
    if sigma == math.inf:
        return 0.0
    if not sigma > 0:
        raise InvalidParameterError("noise multiplier must be positive")
    return 2 * math.sqrt(2 * math.log(1.25 / delta_prime)) / sigma


def sparse_sgd_assumption_lhs(eps_sel: float, delta_prime: float, sigma: float,
                              b: int, n: int) -> float:
    return b / n * (eps_sel + gaussian_step_epsilon(sigma, delta_prime))


def _check_sgd_args(eps_sel, delta_prime, sigma, b, n, T):
    if eps_sel < 0:
        raise InvalidParameterError("selection epsilon must be nonnegative")
    if not (0 < delta_prime < 1):
        raise InvalidParameterError("delta' must lie in (0, 1)")
    if not (1 <= b <= n) or T < 1:
        raise InvalidParameterError("need 1 <= b <= n and T >= 1")


def sparse_sgd_total_budget(eps_sel: float, delta_prime: float, sigma: float,
                            b: int, n: int, T: int) -> PrivacyBudget:
    """Total budget of T steps of the two-clipping sparse DP-SGD.

    Returns (4 b sqrt(T ln(n / (2 b T delta'))) / n * (eps' + g), 4 b T delta' / n)
    with g = 2 sqrt(2 ln(1.25/delta')) / sigma, provided
    (b/n) (eps' + g) <= 1/sqrt(T) and n > 2 b T delta' e.
    """
    _check_sgd_args(eps_sel, delta_prime, sigma, b, n, T)
    lhs = sparse_sgd_assumption_lhs(eps_sel, delta_prime, sigma, b, n)
    if lhs > 1 / math.sqrt(T):
        raise AssumptionViolatedError(
            f"requires (b/n)(eps' + 2 sqrt(2 ln(1.25/delta'))/sigma) <= 1/sqrt(T); "
            f"got {lhs:.6g} > {1 / math.sqrt(T):.6g}")
    if not n > 2 * b * T * delta_prime * math.e:
        raise AssumptionViolatedError("requires n > 2 b T delta' e so that the log term exceeds 1")
    eps = (4 * b * math.sqrt(T * math.log(n / (2 * b * T * delta_prime))) / n
           * (eps_sel + gaussian_step_epsilon(sigma, delta_prime)))
    return PrivacyBudget(eps, min(1.0, 4 * b * T * delta_prime / n))


def sparse_sgd_step_budget(eps_sel: float, delta_prime: float, sigma: float,
                           b: int, n: int) -> PrivacyBudget:
    """Amplified per-step budget (eps~, delta~) = ((b/n)(eps' + g), 2 b delta' / n)."""
    return PrivacyBudget(sparse_sgd_assumption_lhs(eps_sel, delta_prime, sigma, b, n),
                         2 * b * delta_prime / n)


def sparse_sgd_composed_budget(eps_sel, delta_prime, sigma, b, n, T) -> PrivacyBudget:
    """Strong composition of the amplified steps with slack T delta~ (the bound before simplification)."""
    step = sparse_sgd_step_budget(eps_sel, delta_prime, sigma, b, n)
    return strong_compose(CompositionPlan(step, T, T * step.delta))


def plan_sparse_sgd(eps_noise: float, eps_selection: float, delta: float,
                    b: int, n: int, T: int) -> tuple[float, float, float]:
    """Turn a total budget split into per-step parameters (eps', delta', sigma).

    delta' is chosen so that 4 b T delta' / n equals ``delta``; the noise
    multiplier and selection epsilon make the two summands of the total
    equal to ``eps_noise`` and ``eps_selection``.
    """
    if eps_noise <= 0 or eps_selection < 0:
        raise InvalidParameterError("noise budget must be positive, selection budget nonnegative")
    delta_prime = delta * n / (4 * b * T)
    _check_sgd_args(eps_selection, delta_prime, 1.0, b, n, T)
    if not n > 2 * b * T * delta_prime * math.e:
        raise AssumptionViolatedError("requires n > 2 b T delta' e")
    scale = 4 * b * math.sqrt(T * math.log(n / (2 * b * T * delta_prime))) / n
    eps_sel = eps_selection / scale
    sigma = 2 * math.sqrt(2 * math.log(1.25 / delta_prime)) / (eps_noise / scale)
    return eps_sel, delta_prime, sigma


def matched_dpsgd_sigma(eps_sel: float, delta_prime: float, sigma: float) -> float:
    """Noise multiplier giving plain DP-SGD the same total as a sparse run.

    Plain DP-SGD has no selection step, so its whole per-step budget goes to
    the Gaussian noise: solve g(sigma_dp) = eps' + g(sigma).
    """
    target = eps_sel + gaussian_step_epsilon(sigma, delta_prime)
    if target == 0:
        return math.inf
    return 2 * math.sqrt(2 * math.log(1.25 / delta_prime)) / target


def numeric_sparse_alpha(s: float, p: int, c1: int, beta: float, budget: PrivacyBudget) -> float:
    """alpha = 20 s (ln p + ln(4 c1 / beta)) sqrt(c1 ln(2/delta)) / eps."""
    if not (0 < beta < 1):
        raise InvalidParameterError(f"beta must lie in (0, 1), got {beta}")
    if not s > 0 or p < 1 or c1 < 1:
        raise InvalidParameterError("need s > 0, p >= 1, c1 >= 1")
    eps, delta = budget
    if not eps > 0 or not (0 < delta < 1):
        raise InvalidParameterError("need epsilon > 0 and 0 < delta < 1")
    return (20 * s * (math.log(p) + math.log(4 * c1 / beta))
            * math.sqrt(c1 * math.log(2 / delta)) / eps)


def erm_alpha(c2: float, m: int, n: int, p: int, c1: int, step: PrivacyBudget) -> float:
    """Threshold of the ERM loop: 40 c2 m (ln p + ln(4 c1 n)) sqrt(c1 ln(2/delta')) / (n eps').

    Equals :func:`numeric_sparse_alpha` with s = 2 c2 m / n and beta = 1/n.
    """
    eps, delta = step
    return (40 * c2 * m * (math.log(p) + math.log(4 * c1 * n))
            * math.sqrt(c1 * math.log(2 / delta)) / (n * eps))
