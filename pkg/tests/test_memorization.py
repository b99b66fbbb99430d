import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsedp.embedding import CbowSamples, EmbeddingTable, draw_negatives
from sparsedp.errors import InvalidParameterError
from sparsedp.mechanisms import NoiseSource
from sparsedp.memorization import (
    Canary,
    PhraseScorer,
    canary_pairs,
    chi_squared_uniform,
    draw_canaries,
    evaluate_canaries,
    generate_and_insert,
    log_perplexity,
    rank,
    sample_phrases,
    write_report,
)


def _samples(n=200, V=30, k=4, seed=0):
    g = np.random.default_rng(seed)
    t = g.integers(0, V, size=n)
    c = g.integers(0, V, size=n)
    return CbowSamples(t, c, draw_negatives(t, c, V, k, NoiseSource(seed)))


# -- canaries and insertion --------------------------------------------------------

def test_canary_validation():
    with pytest.raises(InvalidParameterError):
        Canary(-1, 0, 0)
    with pytest.raises(InvalidParameterError):
        Canary(0, 5, 1).check(5)
    cs = draw_canaries(500, 7, NoiseSource(0))
    assert len(cs) == 500 and all(max(c.tokens()) < 7 for c in cs)


def test_insertion_rejects_zero_count():
    with pytest.raises(InvalidParameterError):
        generate_and_insert(_samples(), 30, 10, 0, NoiseSource(0))


@pytest.mark.parametrize("n_c", [1, 3, 9])
def test_insertion_conserves_samples(n_c):
    base = _samples()
    out, canaries = generate_and_insert(base, 30, 10, n_c, NoiseSource(1), window=4)
    per_canary = len(canary_pairs(Canary(0, 1, 2), 4))
    assert per_canary == 6
    assert len(out) == len(base) + 10 * n_c * per_canary
    assert out.num_negatives == base.num_negatives

    # every canary pair occurs at least n_c times (more only by coincidence)
    counts = Counter(zip(out.targets.tolist(), out.contexts.tolist()))
    for c in canaries:
        for t, ctx in canary_pairs(c, 4).tolist():
            assert counts[(t, ctx)] >= n_c

    # original samples keep their relative order
    orig_rows = np.column_stack([base.targets, base.contexts, base.negatives])
    out_rows = np.column_stack([out.targets, out.contexts, out.negatives])
    j = 0
    for row in out_rows:
        if j < len(orig_rows) and np.array_equal(row, orig_rows[j]):
            j += 1
    assert j == len(orig_rows)


def test_insertion_positions_are_spread():
    base = _samples(n=2000)
    out, _ = generate_and_insert(base, 30, 200, 1, NoiseSource(2))
    is_orig = np.zeros(len(out), bool)
    orig = {tuple(r) for r in np.column_stack([base.targets, base.contexts, base.negatives]).tolist()}
    rows = np.column_stack([out.targets, out.contexts, out.negatives]).tolist()
    is_orig[:] = [tuple(r) in orig for r in rows]
    inserted = np.flatnonzero(~is_orig)
    # inserted blocks land throughout the list, not at one end
    assert inserted.min() < len(out) * 0.1 and inserted.max() > len(out) * 0.9


# -- log-perplexity ------------------------------------------------------------------

def test_zero_table_perplexity():
    V = 50
    table = EmbeddingTable(np.zeros((V, 4)))
    assert log_perplexity(table, Canary(1, 2, 3)) == pytest.approx(2 * math.log(V), rel=1e-14)


def test_two_word_hand_calculation():
    table = EmbeddingTable(np.array([[3.0, 0.0], [0.0, 0.0]]))
    # P(0 | 0) = 1 / (1 + e^-9) twice (the two-word context mean equals e_0)
    expected = 2 * math.log1p(math.exp(-9.0))
    assert log_perplexity(table, Canary(0, 0, 0)) == pytest.approx(expected, rel=1e-12)
    # the losing word: -log(e^0 / (e^9 + e^0)) = log(1 + e^9) for the first step;
    # the second step uses m = (e_0 + e_1) / 2 = (1.5, 0): scores (4.5, 0)
    expected = math.log1p(math.exp(9.0)) + math.log1p(math.exp(-4.5))
    assert log_perplexity(table, Canary(0, 1, 0)) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_perplexity_nonnegative_and_scorer_agrees(seed):
    g = np.random.default_rng(seed)
    table = EmbeddingTable(g.normal(scale=2.0, size=(12, 3)))
    c = Canary(*map(int, g.integers(0, 12, size=3)))
    p = log_perplexity(table, c)
    assert p >= 0
    assert PhraseScorer(table).perplexities(c.c0, [c.c1], [c.c2])[0] == pytest.approx(p, rel=1e-12)


# -- rank -----------------------------------------------------------------------

def _extreme_diagonal_canary(V=8, highest=True):
    """A table and a canary (c0, x, x) whose perplexity strictly beats every c1 != c2 phrase."""
    for seed in range(1000):
        table = EmbeddingTable(np.random.default_rng(seed).normal(size=(V, 3)))
        s = PhraseScorer(table)
        a, b = np.meshgrid(np.arange(V), np.arange(V), indexing="ij")
        perp = s.perplexities(0, a.ravel(), b.ravel()).reshape(V, V)
        diag = np.diag(perp)
        off = perp[~np.eye(V, dtype=bool)]
        x = int(np.argmax(diag) if highest else np.argmin(diag))
        if (highest and diag[x] > off.max()) or (not highest and diag[x] < off.min()):
            return table, Canary(0, x, x)
    raise AssertionError("no suitable table found")


def test_rank_extremes():
    table, c = _extreme_diagonal_canary(highest=True)
    assert rank(table, c, 500, NoiseSource(0)) == 0
    table, c = _extreme_diagonal_canary(highest=False)
    assert rank(table, c, 500, NoiseSource(0)) == 500


def test_rank_counts_ties():
    table = EmbeddingTable(np.zeros((10, 2)))
    assert rank(table, Canary(0, 1, 2), 300, NoiseSource(0)) == 300


def test_rank_antitone_in_perplexity():
    g = np.random.default_rng(3)
    table = EmbeddingTable(g.normal(size=(20, 4)))
    s = PhraseScorer(table)
    c0 = 5
    a, b = sample_phrases(c0, 20, 400, NoiseSource(9))
    sampled = s.perplexities(c0, a, b)
    canaries = [Canary(c0, int(x), int(y)) for x, y in g.integers(0, 20, size=(30, 2))]
    perps = [s.perplexities(c0, [c.c1], [c.c2])[0] for c in canaries]
    ranks = [rank(table, c, 400, NoiseSource(9), scorer=s) for c in canaries]
    for i in range(30):
        assert ranks[i] == np.count_nonzero(sampled >= perps[i])
        for j in range(30):
            if perps[i] <= perps[j]:
                assert ranks[i] >= ranks[j]


def test_sampled_phrases_have_distinct_words():
    a, b = sample_phrases(0, 5, 10_000, NoiseSource(0))
    assert np.all(a != b)
    counts = np.bincount(a * 5 + b, minlength=25).reshape(5, 5)
    off = counts[~np.eye(5, dtype=bool)]
    assert off.min() > 0.8 * 10_000 / 20 and off.max() < 1.2 * 10_000 / 20


def test_untrained_model_ranks_are_uniform():
    V = 100
    table = EmbeddingTable.random(V, 10, NoiseSource(4), scale=0.05)
    canaries = draw_canaries(1000, V, NoiseSource(5))
    report = evaluate_canaries(table, canaries, 0, 1000, seed=6)
    assert report.p_value > 0.01


def test_rank_rejects_bad_sample_size():
    with pytest.raises(InvalidParameterError):
        rank(EmbeddingTable(np.zeros((4, 2))), Canary(0, 1, 2), 0, NoiseSource(0))


# -- chi-squared ------------------------------------------------------------------

def test_uniform_histogram_statistic_zero():
    ranks = np.repeat(np.arange(10) * 1000 + 500, 10)
    res = chi_squared_uniform(ranks, 10, 10_000)
    assert res.statistic == 0.0 and res.p_value == 1.0 and res.distance == 0.0
    assert res.histogram == (10,) * 10


def test_single_bin_statistic():
    res = chi_squared_uniform(np.full(1000, 10_000), 10, 10_000)
    assert res.statistic == pytest.approx(9000.0, rel=1e-14)
    assert res.p_value < 1e-300 or res.p_value == 0.0
    assert res.distance == pytest.approx(9.0)
    assert res.histogram[-1] == 1000


def test_expected_count_rule():
    with pytest.raises(InvalidParameterError):
        chi_squared_uniform(np.zeros(49), 10, 10_000)
    with pytest.raises(InvalidParameterError):
        chi_squared_uniform(np.zeros(50), 1, 10_000)
    with pytest.raises(InvalidParameterError):
        chi_squared_uniform(np.full(50, 10_001), 10, 10_000)


def test_type_one_error_calibration():
    g = np.random.default_rng(12345)
    rejections = 0
    for _ in range(1000):
        ranks = g.integers(0, 10_001, size=1000)
        rejections += chi_squared_uniform(ranks, 10, 10_000).p_value < 0.01
    # expected 10 of 1000; 20 is three binomial standard deviations above
    assert rejections <= 20


# -- reports --------------------------------------------------------------------------

def test_evaluation_is_order_independent():
    table = EmbeddingTable.random(40, 5, NoiseSource(0), scale=0.3)
    canaries = draw_canaries(60, 40, NoiseSource(1))
    fwd = evaluate_canaries(table, canaries, 3, 500, seed=7)
    assert sum(fwd.test.histogram) == 60
    assert 0.0 <= fwd.p_value <= 1.0
    # canary i's stream depends only on (seed, i), so a prefix reproduces the prefix ranks
    prefix = evaluate_canaries(table, canaries[:50], 3, 500, seed=7)
    assert prefix.ranks == fwd.ranks[:50]


def test_report_file(tmp_path):
    table = EmbeddingTable.random(40, 5, NoiseSource(0))
    rep = evaluate_canaries(table, draw_canaries(50, 40, NoiseSource(1)), 3, 200, seed=2)
    path = tmp_path / "r.jsonl"
    write_report([rep], path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(lines) == 51
    assert set(lines[0]) == {"label", "canary", "perplexity", "rank"}
    summary = lines[-1]["summary"]
    assert summary["n_c"] == 3 and sum(summary["histogram"]) == 50
    assert {"statistic", "p_value", "distance"} <= set(summary)
