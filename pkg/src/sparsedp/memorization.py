"""Canary exposure tests for trained embedding tables.

Random three-word canaries are inserted into the training samples a fixed
number of times. After training, each canary's log-perplexity is compared
with random phrases sharing its first word; a model that memorized the
canaries ranks them unusually high, which shows up as a non-uniform rank
histogram.

Phrase probabilities use a softmax over dot products:
P(c1 | c0) = softmax(E e_c0)[c1] and P(c2 | c0, c1) = softmax(E m)[c2]
with m the mean of e_c0 and e_c1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .embedding import CbowSamples, EmbeddingTable, draw_negatives, window_pairs
from .errors import InvalidParameterError
from .mechanisms import NoiseSource

DEFAULT_BINS = 10


@dataclass(frozen=True)
class Canary:
    c0: int
    c1: int
    c2: int

    def __post_init__(self):
        if min(self.c0, self.c1, self.c2) < 0:
            raise InvalidParameterError("canary indices must be nonnegative")

    def check(self, vocab_size: int) -> None:
        if max(self.c0, self.c1, self.c2) >= vocab_size:
            raise InvalidParameterError(f"canary {self} out of range for V={vocab_size}")

    def tokens(self) -> tuple[int, int, int]:
        return (self.c0, self.c1, self.c2)


def draw_canaries(count: int, vocab_size: int, rng) -> list[Canary]:
    """``count`` phrases of three independent uniform vocabulary indices."""
    if count < 0 or vocab_size < 1:
        raise InvalidParameterError("need count >= 0 and a nonempty vocabulary")
    src = rng if isinstance(rng, NoiseSource) else NoiseSource(rng)
    words = src.rng.integers(0, vocab_size, size=(count, 3))
    return [Canary(*map(int, w)) for w in words]


def canary_pairs(c: Canary, window: int) -> np.ndarray:
    return window_pairs(c.tokens(), window)


def generate_and_insert(samples: CbowSamples, vocab_size: int, count: int, n_c: int, rng,
                        window: int = 4) -> tuple[CbowSamples, list[Canary]]:
    """Draw ``count`` canaries and insert each ``n_c`` times at random positions.

    One insertion is the block of window pairs the phrase contributes, with
    fresh uniform negatives; the block is placed before a uniformly random
    position of the sample list, so relative order of the original samples is
    kept.
    """
    if n_c < 1:
        raise InvalidParameterError(f"n_c must be at least 1, got {n_c}")
    src = rng if isinstance(rng, NoiseSource) else NoiseSource(rng)
    canaries = draw_canaries(count, vocab_size, src.spawn(0))
    k = samples.num_negatives
    blocks = [canary_pairs(c, window) for c in canaries for _ in range(n_c)]
    if not blocks:
        return samples, canaries
    sizes = np.array([b.shape[0] for b in blocks])
    pairs = np.concatenate(blocks)
    neg = draw_negatives(pairs[:, 0], pairs[:, 1], vocab_size, k, src.spawn(1))
    inserted = CbowSamples(pairs[:, 0], pairs[:, 1], neg)

    n = len(samples)
    where = src.spawn(2).rng.integers(0, n + 1, size=len(blocks))
    keys = np.concatenate([2 * np.arange(n) + 1, np.repeat(2 * where, sizes)])
    order = np.argsort(keys, kind="stable")
    return CbowSamples.concat([samples, inserted]).take(order), canaries


class PhraseScorer:
    """Log-perplexities of three-word phrases under an embedding table."""

    def __init__(self, table: EmbeddingTable):
        E = table.matrix
        self.V = table.vocab_size
        self.gram = E @ E.T
        self.lse1 = logsumexp(self.gram, axis=1)

    def _second(self, c0: int):
        scores = 0.5 * (self.gram[c0][None, :] + self.gram)  # row c1: scores of m(c0, c1)
        return scores, logsumexp(scores, axis=1)

    def perplexities(self, c0: int, c1, c2) -> np.ndarray:
        c1 = np.asarray(c1, dtype=np.int64)
        c2 = np.asarray(c2, dtype=np.int64)
        scores, lse2 = self._second(c0)
        first = self.lse1[c0] - self.gram[c0, c1]
        return first + lse2[c1] - scores[c1, c2]


def log_perplexity(table: EmbeddingTable, c: Canary) -> float:
    """-log P(c1 | c0) - log P(c2 | c0, c1)."""
    c.check(table.vocab_size)
    E = table.matrix
    s1 = E @ E[c.c0]
    s2 = E @ (0.5 * (E[c.c0] + E[c.c1]))
    return float((logsumexp(s1) - s1[c.c1]) + (logsumexp(s2) - s2[c.c2]))


def sample_phrases(c0: int, vocab_size: int, sample_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """``sample_size`` pairs (c1', c2') with c1' != c2', drawn uniformly with replacement."""
    if vocab_size < 2:
        raise InvalidParameterError("need at least two words to sample phrases")
    g = rng.rng if isinstance(rng, NoiseSource) else NoiseSource(rng).rng
    a = g.integers(0, vocab_size, size=sample_size)
    b = g.integers(0, vocab_size - 1, size=sample_size)
    b += b >= a
    return a, b


def rank(table: EmbeddingTable, c: Canary, sample_size: int, rng,
         scorer: PhraseScorer | None = None) -> int:
    """Number of sampled phrases (c0, c1', c2') whose log-perplexity is >= the canary's."""
    if sample_size < 1:
        raise InvalidParameterError("sample_size must be positive")
    c.check(table.vocab_size)
    scorer = scorer or PhraseScorer(table)
    a, b = sample_phrases(c.c0, table.vocab_size, sample_size, rng)
    own = scorer.perplexities(c.c0, [c.c1], [c.c2])[0]
    return int(np.count_nonzero(scorer.perplexities(c.c0, a, b) >= own))


@dataclass(frozen=True)
class ChiSquared:
    statistic: float
    p_value: float
    distance: float
    histogram: tuple[int, ...]


def chi_squared_uniform(ranks: Sequence[int], bins: int = DEFAULT_BINS,
                        sample_size: int = 10_000) -> ChiSquared:
    """Pearson goodness of fit of ranks against uniform on [0, sample_size].

    ``distance`` is the statistic divided by the number of ranks.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    if bins < 2:
        raise InvalidParameterError("need at least two bins")
    if ranks.size < 5 * bins:
        raise InvalidParameterError(
            f"{ranks.size} ranks is too few for {bins} bins (need >= {5 * bins})")
    if ranks.min() < 0 or ranks.max() > sample_size:
        raise InvalidParameterError(f"ranks must lie in [0, {sample_size}]")
    hist, _ = np.histogram(ranks, bins=np.linspace(0, sample_size, bins + 1))
    expected = ranks.size / bins
    stat = float(np.sum((hist - expected) ** 2) / expected)
    return ChiSquared(stat, float(chi2.sf(stat, bins - 1)), stat / ranks.size, tuple(int(h) for h in hist))


@dataclass
class CanaryReport:
    canaries: list[Canary]
    perplexities: list[float]
    ranks: list[int]
    n_c: int
    test: ChiSquared
    sample_size: int
    label: str = "canary"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(self.test.histogram) != len(self.ranks):
            raise InvalidParameterError("histogram counts must sum to the number of canaries")

    @property
    def p_value(self) -> float:
        return self.test.p_value

    def summary(self) -> dict:
        return {"label": self.label, "n_c": self.n_c, "statistic": self.test.statistic,
                "p_value": self.test.p_value, "distance": self.test.distance,
                "histogram": list(self.test.histogram), "count": len(self.ranks),
                "sample_size": self.sample_size, **self.extra}


def evaluate_canaries(table: EmbeddingTable, canaries: Sequence[Canary], n_c: int,
                      sample_size: int, seed: int, bins: int = DEFAULT_BINS,
                      label: str = "canary") -> CanaryReport:
    """Rank every canary against its own phrase sample and test the ranks for uniformity.

    Canary ``i`` uses the stream derived from (seed, i), so results do not
    depend on evaluation order.
    """
    scorer = PhraseScorer(table)
    root = NoiseSource(seed)
    ranks, perps = [], []
    for i, c in enumerate(canaries):
        c.check(table.vocab_size)
        perps.append(float(scorer.perplexities(c.c0, [c.c1], [c.c2])[0]))
        ranks.append(rank(table, c, sample_size, root.spawn(i), scorer=scorer))
    return CanaryReport(list(canaries), perps, ranks, n_c,
                        chi_squared_uniform(ranks, bins, sample_size), sample_size, label)


def write_report(reports: Sequence[CanaryReport], path) -> None:
    """JSON lines: one record per canary, then one summary record per report."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for rep in reports:
            for c, perp, r in zip(rep.canaries, rep.perplexities, rep.ranks):
                fh.write(json.dumps({"label": rep.label, "canary": list(c.tokens()),
                                     "perplexity": perp, "rank": r}) + "\n")
            fh.write(json.dumps({"summary": rep.summary()}) + "\n")
