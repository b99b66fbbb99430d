"""CBOW word embeddings with negative sampling on one shared table.

A sample is a (target, context, negatives) triple of vocabulary indices.
The loss of a sample is

    -log sigmoid(e_t . e_c) - sum_n log sigmoid(-e_t . e_n)

and its gradient touches only the rows t, c and the negatives, which is
what makes the per-sample gradients sparse over the flattened V x dim table.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidParameterError
from .mechanisms import NoiseSource, SparseVector, _as_rng

STOP_WORDS = frozenset("""
a about above after again against all am an and any are as at be because been
before being below between both but by can could did do does doing down during
each few for from further had has have having he her here hers herself him
himself his how i if in into is it its itself just me more most my myself no nor
not now of off on once only or other our ours ourselves out over own same she
should so some such than that the their theirs them themselves then there these
they this those through to too under until up upon very was we were what when
where which while who whom why will with would you your yours yourself
yourselves
""".split())

_TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)*")


def tokenize(line: str) -> list[str]:
    """Lower-cased alphabetic tokens (inner apostrophes kept)."""
    return _TOKEN.findall(line.lower())


def load_stop_words(path) -> frozenset[str]:
    """One word per line; blank lines and ``#`` comments are ignored."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidParameterError("vocabulary contains duplicate tokens")
        if len(self.counts) != len(self.tokens):
            raise InvalidParameterError("need one count per token")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_counts(cls, counts: Counter, size: int) -> "Vocabulary":
        """The ``size`` most frequent tokens; ties broken alphabetically."""
        if size < 1:
            raise InvalidParameterError("vocabulary size must be positive")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
        return cls(tuple(t for t, _ in ranked), tuple(int(c) for _, c in ranked))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index[token]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Indices of in-vocabulary tokens; others are dropped."""
        idx = self._index
        return [idx[t] for t in tokens if t in idx]


@dataclass
class EmbeddingTable:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InvalidParameterError("embedding table must be a V x dim matrix")

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng, scale: float | None = None) -> "EmbeddingTable":
        """Uniform init in [-scale, scale]; scale defaults to 0.5 / dim."""
        scale = 0.5 / dim if scale is None else scale
        return cls(_as_rng(rng).rng.uniform(-scale, scale, size=(vocab_size, dim)))

    @classmethod
    def from_flat(cls, flat: np.ndarray, vocab_size: int) -> "EmbeddingTable":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size % vocab_size:
            raise InvalidParameterError(f"{flat.size} parameters do not split into {vocab_size} rows")
        return cls(flat.reshape(vocab_size, -1))

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def flat(self) -> np.ndarray:
        return self.matrix.reshape(-1)


class CbowSample(NamedTuple):
    target: int
    context: int
    negatives: tuple[int, ...]


class CbowSamples:
    """Column store of CBOW samples: targets, contexts and an (n, |N|) negatives matrix."""

    def __init__(self, targets, contexts, negatives):
        self.targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        self.contexts = np.asarray(contexts, dtype=np.int64).reshape(-1)
        neg = np.asarray(negatives, dtype=np.int64)
        self.negatives = neg.reshape(self.targets.size, -1) if neg.size else np.zeros((self.targets.size, 0), np.int64)
        if self.contexts.size != self.targets.size or self.negatives.shape[0] != self.targets.size:
            raise InvalidParameterError("targets, contexts and negatives must have equal length")

    @classmethod
    def from_samples(cls, samples: Sequence[CbowSample], num_negatives: int | None = None) -> "CbowSamples":
        k = num_negatives if num_negatives is not None else (len(samples[0].negatives) if samples else 0)
        return cls([s.target for s in samples], [s.context for s in samples],
                   np.array([s.negatives for s in samples], dtype=np.int64).reshape(len(samples), k))

    def __len__(self) -> int:
        return self.targets.size

    def __getitem__(self, i) -> CbowSample:
        return CbowSample(int(self.targets[i]), int(self.contexts[i]), tuple(int(x) for x in self.negatives[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_negatives(self) -> int:
        return self.negatives.shape[1]

    def take(self, idx) -> "CbowSamples":
        idx = np.asarray(idx, dtype=np.int64)
        return CbowSamples(self.targets[idx], self.contexts[idx], self.negatives[idx])

    def max_index(self) -> int:
        parts = [self.targets, self.contexts, self.negatives.ravel()]
        return int(max((p.max() for p in parts if p.size), default=-1))

    @staticmethod
    def concat(parts: Sequence["CbowSamples"]) -> "CbowSamples":
        return CbowSamples(np.concatenate([p.targets for p in parts]),
                           np.concatenate([p.contexts for p in parts]),
                           np.concatenate([p.negatives for p in parts]))


class Preprocessed(NamedTuple):
    vocab: Vocabulary
    train: CbowSamples
    val: CbowSamples
    test: CbowSamples


def window_pairs(sentence: Sequence[int], window: int) -> np.ndarray:
    """All (target, context) pairs at distance 1..window within a sentence."""
    s = np.asarray(sentence, dtype=np.int64)
    out = []
    for d in range(1, window + 1):
        if d >= s.size:
            break
        out.append(np.stack([s[:-d], s[d:]], axis=1))
        out.append(np.stack([s[d:], s[:-d]], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def draw_negatives(targets, contexts, vocab_size: int, k: int, rng) -> np.ndarray:
    """k distinct indices per pair, uniform over the vocabulary minus {t, c}."""
    targets = np.asarray(targets, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)
    if k == 0:
        return np.zeros((targets.size, 0), dtype=np.int64)
    if vocab_size - 2 < k:
        raise InvalidParameterError(
            f"cannot draw {k} distinct negatives from a vocabulary of {vocab_size}")
    g = _as_rng(rng).rng
    out = np.empty((targets.size, k), dtype=np.int64)
    for i, (t, c) in enumerate(zip(targets, contexts)):
        excluded = sorted({int(t), int(c)})
        draw = g.choice(vocab_size - len(excluded), size=k, replace=False)
        for e in excluded:  # ascending, so each shift accounts for the previous ones
            draw += draw >= e
        out[i] = draw
    return out


def preprocess(corpus_text: str, vocab_size: int, window: int, negatives: int,
               split_sizes: tuple[int, int, int], rng, stop_words=STOP_WORDS) -> Preprocessed:
    """Corpus text to a vocabulary and train/val/test CBOW samples.

    Each line is a sentence. Stop words are removed, the ``vocab_size`` most
    frequent remaining tokens form the vocabulary, out-of-vocabulary tokens are
    dropped, and every ordered pair within ``window`` positions becomes a
    sample with ``negatives`` uniform negatives. Pairs are shuffled before the
    split; a split larger than the number of pairs is an error.
    """
    if window < 1 or negatives < 0:
        raise InvalidParameterError("need window >= 1 and negatives >= 0")
    if any(s < 0 for s in split_sizes) or len(split_sizes) != 3:
        raise InvalidParameterError("split sizes must be three nonnegative integers")
    stop_words = frozenset(stop_words or ())
    sentences = [[t for t in tokenize(line) if t not in stop_words]
                 for line in corpus_text.splitlines()]
    counts = Counter(t for s in sentences for t in s)
    if not counts:
        raise InvalidParameterError("corpus contains no usable tokens")
    vocab = Vocabulary.from_counts(counts, vocab_size)
    pairs = [window_pairs(vocab.encode(s), window) for s in sentences]
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), np.int64)
    needed = sum(split_sizes)
    if pairs.shape[0] < needed:
        raise InvalidParameterError(
            f"corpus yields {pairs.shape[0]} pairs but the splits need {needed}")
    source = rng if isinstance(rng, NoiseSource) else NoiseSource(rng)
    order = source.spawn(0).rng.permutation(pairs.shape[0])[:needed]
    pairs = pairs[order]
    neg = draw_negatives(pairs[:, 0], pairs[:, 1], len(vocab), negatives, source.spawn(1))
    all_samples = CbowSamples(pairs[:, 0], pairs[:, 1], neg)
    a, b, _ = split_sizes
    return Preprocessed(vocab, all_samples.take(np.arange(a)), all_samples.take(np.arange(a, a + b)),
                        all_samples.take(np.arange(a + b, needed)))


def log_sigmoid(z):
    """log(1 / (1 + e^-z)), evaluated without overflow on either side."""
    z = np.asarray(z, dtype=np.float64)
    neg = np.minimum(z, 0.0)
    return np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))), neg - np.log1p(np.exp(neg)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_sample(table: EmbeddingTable, s: CbowSample) -> None:
    V = table.vocab_size
    idx = (s.target, s.context, *s.negatives)
    if any(not (0 <= int(i) < V) for i in idx):
        raise InvalidParameterError(f"sample index out of range for V={V}: {idx}")


def cbow_loss(table: EmbeddingTable, s: CbowSample) -> float:
    _check_sample(table, s)
    E = table.matrix
    et = E[s.target]
    loss = -log_sigmoid(et @ E[s.context])
    if s.negatives:
        loss -= np.sum(log_sigmoid(-(E[list(s.negatives)] @ et)))
    return float(loss)


def cbow_gradient(table: EmbeddingTable, s: CbowSample) -> SparseVector:
    """Gradient over the flattened table; nonzero only on rows {t, c} and the negatives."""
    _check_sample(table, s)
    E, dim = table.matrix, table.dim
    t, c, neg = s.target, s.context, np.asarray(s.negatives, dtype=np.int64)
    et, ec = E[t], E[c]
    gc = sigmoid(et @ ec) - 1.0
    gn = sigmoid(E[neg] @ et) if neg.size else np.zeros(0)
    rows = np.concatenate([[t, c], neg])
    grads = np.vstack([gc * ec + gn @ E[neg], gc * et, np.outer(gn, et)])
    uniq, inv = np.unique(rows, return_inverse=True)
    block = np.zeros((uniq.size, dim))
    np.add.at(block, inv, grads)
    idx = (uniq[:, None] * dim + np.arange(dim)).ravel()
    return SparseVector(table.vocab_size * dim, idx, block.ravel())


class CbowOracle:
    """Per-sample CBOW gradients over the flattened table, for the generic trainer."""

    def __init__(self, samples: CbowSamples, vocab_size: int, dim: int):
        if samples.max_index() >= vocab_size:
            raise InvalidParameterError("sample index exceeds the vocabulary size")
        self.samples = samples
        self.vocab_size, self.dim = vocab_size, dim
        self.dimension = vocab_size * dim
        self.num_samples = len(samples)

    def _table(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(params, dtype=np.float64).reshape(self.vocab_size, self.dim)

    def losses(self, params: np.ndarray, batch=None) -> np.ndarray:
        E = self._table(params)
        S = self.samples if batch is None else self.samples.take(batch)
        et = E[S.targets]
        pos = np.einsum("ij,ij->i", et, E[S.contexts])
        negs = np.einsum("ikj,ij->ik", E[S.negatives], et)
        return -log_sigmoid(pos) - log_sigmoid(-negs).sum(axis=1)

    def loss(self, params: np.ndarray, batch=None) -> float:
        if self.num_samples == 0 or (batch is not None and len(batch) == 0):
            return 0.0
        return float(np.mean(self.losses(params, batch)))

    def per_sample_gradients(self, params: np.ndarray, batch) -> list[SparseVector]:
        E, dim = self._table(params), self.dim
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size == 0:
            return []
        S = self.samples.take(batch)
        et, ec, en = E[S.targets], E[S.contexts], E[S.negatives]
        gc = sigmoid(np.einsum("ij,ij->i", et, ec)) - 1.0
        gn = sigmoid(np.einsum("ikj,ij->ik", en, et))
        g_t = gc[:, None] * ec + np.einsum("ik,ikj->ij", gn, en)
        g_c = gc[:, None] * et
        g_n = gn[:, :, None] * et[:, None, :]
        rows = np.concatenate([S.targets[:, None], S.contexts[:, None], S.negatives], axis=1)
        grads = np.concatenate([g_t[:, None], g_c[:, None], g_n], axis=1)
        order = np.argsort(rows, axis=1, kind="stable")
        rows = np.take_along_axis(rows, order, axis=1)
        grads = np.take_along_axis(grads, order[:, :, None], axis=1)
        offs = np.arange(dim)
        size = self.dimension
        out = []
        for r, g in zip(rows, grads):
            if np.any(r[1:] == r[:-1]):  # target == context
                r, inv = np.unique(r, return_inverse=True)
                merged = np.zeros((r.size, dim))
                np.add.at(merged, inv, g)
                g = merged
            out.append(SparseVector(size, (r[:, None] * dim + offs).ravel(), g.ravel()))
        return out


def write_vocabulary(vocab: Vocabulary, path) -> None:
    """One ``token<TAB>count`` line per entry; the line number is the index."""
    Path(path).write_text("".join(f"{t}\t{c}\n" for t, c in zip(vocab.tokens, vocab.counts)),
                          encoding="utf-8")


def read_vocabulary(path) -> Vocabulary:
    tokens, counts = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        tok, _, cnt = line.partition("\t")
        tokens.append(tok)
        counts.append(int(cnt) if cnt else 0)
    return Vocabulary(tuple(tokens), tuple(counts))


def write_samples(samples: CbowSamples, path) -> None:
    """One whitespace-separated record per line: target context n_1 .. n_k."""
    cols = np.column_stack([samples.targets, samples.contexts, samples.negatives])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# target context negatives:{samples.num_negatives}\n")
        np.savetxt(fh, cols, fmt="%d")


def read_samples(path) -> CbowSamples:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#") or "negatives:" not in header:
            raise InvalidParameterError(f"{path}: missing sample file header")
        k = int(header.rsplit("negatives:", 1)[1])
        data = np.loadtxt(fh, dtype=np.int64, ndmin=2).reshape(-1, 2 + k)
    if data.size and data.min() < 0:
        raise InvalidParameterError(f"{path}: negative index")
    return CbowSamples(data[:, 0], data[:, 1], data[:, 2:])
