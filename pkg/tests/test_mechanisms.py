import math
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from sparsedp.errors import (
    BudgetOutOfRangeError,
    EmptySelectionError,
    InvalidParameterError,
    InvariantViolation,
)
from sparsedp.mechanisms import (
    NoiseSource,
    PrivacyBudget,
    SelectionMask,
    SparseVector,
    exp_select_topk,
    gaussian_mechanism,
    gaussian_sigma,
    laplace_sample,
    numeric_sparse,
    numeric_sparse_scan,
    per_draw_epsilon,
    selection_size,
    sparse_vector_select,
    uniform_select,
)


# -- domain types ---------------------------------------------------------------

def test_privacy_budget_validation():
    PrivacyBudget(0.0, 0.0)
    PrivacyBudget(3.0, 1.0)
    for eps, delta in [(-1e-9, 0.0), (1.0, -0.1), (1.0, 1.5), (float("nan"), 0.1)]:
        with pytest.raises(InvalidParameterError):
            PrivacyBudget(eps, delta)
    assert tuple(PrivacyBudget(0.5, 1e-6)) == (0.5, 1e-6)


def test_sparse_vector_invariants():
    v = SparseVector(10, [1, 4, 7], [0.5, 0.0, -2.0])
    assert v.nnz == 2
    assert list(v.support()) == [1, 7]
    np.testing.assert_array_equal(v.to_dense(), [0, .5, 0, 0, 0, 0, 0, -2, 0, 0])
    with pytest.raises(InvalidParameterError):
        SparseVector(10, [4, 1], [1.0, 1.0])
    with pytest.raises(InvalidParameterError):
        SparseVector(10, [3, 3], [1.0, 1.0])
    with pytest.raises(InvalidParameterError):
        SparseVector(10, [10], [1.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_sparse_vector_dense_roundtrip(xs):
    x = np.array(xs)
    v = SparseVector.from_dense(x)
    np.testing.assert_array_equal(v.to_dense(), x)
    assert v.nnz == np.count_nonzero(x)
    assert math.isclose(v.norm(), float(np.linalg.norm(x)), rel_tol=1e-12, abs_tol=1e-300)


def test_selection_mask_cap_is_enforced():
    m = SelectionMask(10, [3, 1, 1], cap=2)
    assert list(m.selected) == [1, 3]
    assert m.to_bool().sum() == 2
    with pytest.raises(InvariantViolation):
        SelectionMask(10, [1, 2, 3], cap=2)
    with pytest.raises(InvariantViolation):
        SelectionMask(10, [10], cap=2)


def test_noise_source_determinism_and_spawn_independence():
    a, b = NoiseSource(7), NoiseSource(7)
    np.testing.assert_array_equal(a.laplace(1.0, 50), b.laplace(1.0, 50))
    c0, c1 = NoiseSource(7).spawn(0), NoiseSource(7).spawn(1)
    assert not np.array_equal(c0.gaussian(1.0, 20), c1.gaussian(1.0, 20))
    np.testing.assert_array_equal(NoiseSource(7).spawn(3).open_uniform(10),
                                  NoiseSource(7).spawn(3).open_uniform(10))
    u = NoiseSource(1).open_uniform(10_000)
    assert u.min() > 0 and u.max() < 1


# -- Laplace / Gaussian ------------------------------------------------------------

def test_laplace_variance_monte_carlo():
    x = laplace_sample(1.0, NoiseSource(0), size=1_000_000)
    assert abs(x.var() - 2.0) <= 0.02
    assert abs(x.mean()) < 0.01


def test_laplace_rejects_nonpositive_scale():
    with pytest.raises(InvalidParameterError):
        laplace_sample(0.0, NoiseSource(0))
    with pytest.raises(InvalidParameterError):
        laplace_sample(-1.0, NoiseSource(0))


def test_laplace_same_seed_same_sequence():
    np.testing.assert_array_equal(laplace_sample(2.0, NoiseSource(5), size=100),
                                  laplace_sample(2.0, NoiseSource(5), size=100))
    assert isinstance(laplace_sample(1.0, NoiseSource(5)), float)


def test_gaussian_sigma_formula():
    s = gaussian_sigma(1.0, PrivacyBudget(1.0, 1e-5))
    assert s * s == pytest.approx(2 * math.log(1.25e5), rel=1e-14)
    assert s * s == pytest.approx(23.472, abs=1e-3)


@pytest.mark.parametrize("eps,delta,s2", [(1.5, 1e-5, 1.0), (0.0, 1e-5, 1.0),
                                          (0.5, 0.0, 1.0), (0.5, 1.0, 1.0)])
def test_gaussian_budget_out_of_range(eps, delta, s2):
    with pytest.raises(BudgetOutOfRangeError):
        gaussian_mechanism(np.zeros(3), s2, PrivacyBudget(eps, delta), NoiseSource(0))


def test_gaussian_zero_sensitivity_rejected():
    with pytest.raises(InvalidParameterError):
        gaussian_mechanism(np.zeros(3), 0.0, PrivacyBudget(1.0, 1e-5), NoiseSource(0))


def test_gaussian_mechanism_on_zero_vector():
    budget = PrivacyBudget(1.0, 1e-5)
    sigma = gaussian_sigma(1.0, budget)
    N = 100_000
    out = gaussian_mechanism(SparseVector.zeros(N), 1.0, budget, NoiseSource(3))
    assert out.shape == (N,)
    assert abs(out.mean()) <= 3 * sigma / math.sqrt(N)
    assert np.count_nonzero(out) == N


# -- NumericSparse ------------------------------------------------------------

def test_numeric_sparse_parameter_errors():
    b = PrivacyBudget(1.0, 1e-5)
    u = np.zeros(5)
    for kwargs in [dict(c1=0), dict(alpha=0.0), dict(s_inf=0.0)]:
        args = dict(u=u, alpha=1.0, c1=2, budget=b, s_inf=1.0, rng=NoiseSource(0))
        args.update(kwargs)
        with pytest.raises(InvalidParameterError):
            numeric_sparse(**args)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c1=st.integers(1, 6), alpha=st.floats(1e-3, 50),
       p=st.integers(1, 200))
def test_numeric_sparse_support_never_exceeds_c1(seed, c1, alpha, p):
    rng = NoiseSource(seed)
    u = rng.rng.normal(0, 10, size=p)
    out = numeric_sparse(u, alpha, c1, PrivacyBudget(1.0, 1e-5), 1.0, rng)
    assert out.dimension == p
    assert out.indices.size <= c1
    assert out.nnz <= c1


def test_numeric_sparse_halts_at_c1():
    # a huge budget makes the scan answer exactly the coordinates above alpha
    u = np.zeros(50)
    u[[3, 9, 20, 30]] = 100.0
    scan = numeric_sparse_scan(u, 50.0, 2, PrivacyBudget(1e6, 1e-5), 1.0, NoiseSource(0))
    assert list(scan.answered) == [3, 9]
    assert scan.stopped_at == 9
    np.testing.assert_allclose(scan.answer.values, [100.0, 100.0], atol=1e-2)


def test_numeric_sparse_zero_input_reports_nothing_above_slack():
    # with alpha from the accuracy bound the zero vector yields no answers
    from sparsedp.accountant import numeric_sparse_alpha
    b = PrivacyBudget(1.0, 1e-5)
    alpha = numeric_sparse_alpha(1.0, 1000, 5, 0.05, b)
    bad = 0
    for seed in range(200):
        out = numeric_sparse(np.zeros(1000), alpha, 5, b, 1.0, NoiseSource(seed))
        assert out.indices.size <= 5
        bad += out.indices.size > 0
    assert bad / 200 <= 0.05


def test_numeric_sparse_deterministic():
    u = NoiseSource(1).rng.normal(size=300)
    a = numeric_sparse(u, 0.5, 4, PrivacyBudget(20.0, 1e-5), 0.1, NoiseSource(9))
    b = numeric_sparse(u, 0.5, 4, PrivacyBudget(20.0, 1e-5), 0.1, NoiseSource(9))
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.values, b.values)


# -- exponential top-k ----------------------------------------------------------

def test_per_draw_epsilon_example():
    assert per_draw_epsilon(0.1, 1e-6, 100) == pytest.approx(0.1 / math.sqrt(200 * math.log(1e6)), rel=1e-14)
    assert per_draw_epsilon(0.1, 1e-6, 100) == pytest.approx(1.9025e-3, rel=1e-4)


def test_selection_size_floor_and_empty():
    assert selection_size(100_000, 0.001) == 100
    assert selection_size(10, 1.0) == 10
    with pytest.raises(EmptySelectionError):
        selection_size(999, 0.001)


@pytest.mark.parametrize("method", ["sequential", "gumbel"])
def test_exp_select_nominal_size(method):
    g = NoiseSource(0).rng.normal(size=100_000)
    m = exp_select_topk(g, 0.001, PrivacyBudget(1.0, 1e-6), 0.1, NoiseSource(1), method=method)
    assert len(m) == 100 and m.cap == 100


def test_exp_select_errors():
    with pytest.raises(EmptySelectionError):
        exp_select_topk(np.ones(10), 0.05, PrivacyBudget(1.0, 1e-6), 0.1, NoiseSource(0))
    for delta in (0.0, 1.0):
        with pytest.raises(InvalidParameterError):
            exp_select_topk(np.ones(10), 0.5, PrivacyBudget(1.0, delta), 0.1, NoiseSource(0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.integers(2, 60), gamma=st.floats(0.05, 1.0),
       method=st.sampled_from(["sequential", "gumbel"]))
def test_exp_select_returns_distinct_indices(seed, p, gamma, method):
    if math.floor(gamma * p) < 1:
        return
    rng = NoiseSource(seed)
    g = rng.rng.normal(size=p) * 5
    m = exp_select_topk(g, gamma, PrivacyBudget(50.0, 1e-6), 0.1, rng, method=method)
    assert len(m) == math.floor(gamma * p)
    assert len(set(m.selected.tolist())) == len(m)


@pytest.mark.parametrize("method", ["sequential", "gumbel"])
def test_exp_select_constant_scores_uniform_subsets(method):
    p, k, trials = 6, 2, 10_000
    rng = NoiseSource(11)
    counts = Counter()
    for _ in range(trials):
        m = exp_select_topk(np.full(p, 0.05), k / p, PrivacyBudget(5.0, 1e-6), 0.1, rng, method=method)
        counts[tuple(m.selected)] += 1
    subsets = list(combinations(range(p), k))
    assert set(counts) == set(subsets)
    assert chisquare([counts[s] for s in subsets]).pvalue > 0.01


def test_exp_select_permutation_equivariance():
    # selection frequencies follow the coordinates when g is permuted
    base = np.array([0.1, 0.0, 0.05, 0.02, 0.1, 0.0])
    perm = np.array([3, 5, 0, 1, 4, 2])
    budget = PrivacyBudget(60.0, 1e-3)

    def freq(g, seed):
        rng = NoiseSource(seed)
        f = np.zeros(g.size)
        for _ in range(4000):
            f[exp_select_topk(g, 2 / 6, budget, 0.1, rng).selected] += 1
        return f / 4000

    f_base = freq(base, 1)
    f_perm = freq(base[perm], 2)
    np.testing.assert_allclose(f_perm, f_base[perm], atol=0.04)


def test_exp_select_prefers_large_scores_with_large_budget():
    g = np.zeros(1000)
    g[[5, 500, 900]] = 1.0
    m = exp_select_topk(g, 0.003, PrivacyBudget(500.0, 1e-6), 0.1, NoiseSource(0))
    assert set(m.selected.tolist()) == {5, 500, 900}


def test_exp_select_sequential_and_gumbel_agree_in_distribution():
    g = np.array([0.1, 0.08, 0.05, 0.0, 0.0, 0.02])
    budget = PrivacyBudget(40.0, 1e-3)
    out = {}
    for method in ("sequential", "gumbel"):
        rng = NoiseSource(3)
        f = np.zeros(6)
        for _ in range(5000):
            f[exp_select_topk(g, 2 / 6, budget, 0.1, rng, method=method).selected] += 1
        out[method] = f / 5000
    np.testing.assert_allclose(out["sequential"], out["gumbel"], atol=0.03)


# -- uniform selection ----------------------------------------------------------

def test_uniform_select_subsets_equally_likely():
    p, k, trials = 10, 5, 100_000
    rng = NoiseSource(2)
    counts = Counter(tuple(uniform_select(p, 0.5, rng).selected) for _ in range(trials))
    subsets = list(combinations(range(p), k))
    assert chisquare([counts[s] for s in subsets]).pvalue > 0.01


def test_uniform_select_full_and_nominal_size():
    assert list(uniform_select(7, 1.0, NoiseSource(0)).selected) == list(range(7))
    assert len(uniform_select(100_000, 0.001, NoiseSource(0))) == 100
    with pytest.raises(EmptySelectionError):
        uniform_select(10, 0.05, NoiseSource(0))


# -- sparse-vector selection ------------------------------------------------------

def test_sparse_vector_select_mask_within_cap():
    g = NoiseSource(0).rng.normal(size=500)
    m = sparse_vector_select(g, 0.05, 7, PrivacyBudget(1.0, 1e-6), 0.2, NoiseSource(1), s0=0.1)
    assert len(m) <= 7 and m.cap == 7
