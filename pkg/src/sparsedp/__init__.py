"""Differentially private training with sparse gradients.

Modules:

- ``mechanisms``: Laplace/Gaussian noise, NumericSparse, private top-k selection
- ``accountant``: amplification, strong composition, trainer budgets
- ``sparse_erm``: sparse DP empirical risk minimization for GLMs
- ``trainer``: sparse DP optimizer, DP-SGD and non-private baselines
- ``embedding``: CBOW with negative sampling
- ``memorization``: canary insertion and rank-uniformity tests
"""

from .errors import (
    AssumptionViolatedError,
    BudgetOutOfRangeError,
    EmptySelectionError,
    InvalidParameterError,
    InvariantViolation,
    SparseDPError,
)
from .mechanisms import NoiseSource, PrivacyBudget, SelectionMask, SparseVector

__version__ = "0.1.0"

__all__ = [
    "AssumptionViolatedError", "BudgetOutOfRangeError", "EmptySelectionError",
    "InvalidParameterError", "InvariantViolation", "SparseDPError",
    "NoiseSource", "PrivacyBudget", "SelectionMask", "SparseVector",
]
