"""Distribution-level scoring of generated corpora.

Large pretrained scorers are out of reach at desk scale, so sequence
likelihood is measured under an in-repo order-2 add-one-smoothed Markov
reference model fit on real data; only orderings between schemes are
meaningful, not absolute numbers. Entropy is pooled-unigram Shannon entropy
in nats. Distribution matching is total variation between empirical n-gram
distributions (or an exact distribution when the generator's law is known).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .data import CorpusStore
from .errors import InputError


def _valid_ngrams(corpus: CorpusStore, order: int) -> np.ndarray:
    """(N, order) rows of within-sequence n-grams covering no pad position."""
    if order < 1 or order > 3:
        raise InputError("supported n-gram orders: 1..3")
    toks, mask = corpus.tokens, corpus.loss_mask
    if toks.shape[1] < order:
        return np.empty((0, order), dtype=np.int64)
    cols = [toks[:, i: toks.shape[1] - order + 1 + i] for i in range(order)]
    keep = mask[:, : toks.shape[1] - order + 1].copy()
    for i in range(1, order):
        keep &= mask[:, i: toks.shape[1] - order + 1 + i]
    return np.stack([c[keep] for c in cols], axis=1)


def ngram_distribution(corpus: CorpusStore, order: int) -> np.ndarray:
    """Dense empirical distribution over V^order n-grams (shape (V,)*order)."""
    v = corpus.vocab_size
    grams = _valid_ngrams(corpus, order)
    if grams.shape[0] == 0:
        raise InputError("corpus too short for requested n-gram order")
    enc = np.zeros(grams.shape[0], dtype=np.int64)
    for i in range(order):
        enc = enc * v + grams[:, i]
    counts = np.bincount(enc, minlength=v ** order).astype(np.float64)
    return (counts / counts.sum()).reshape((v,) * order)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise InputError("distributions must have matching support")
    return float(0.5 * np.abs(p - q).sum())


def distribution_tv(generated: CorpusStore, real: CorpusStore, order: int) -> float:
    """TV distance between empirical n-gram distributions of two corpora."""
    if generated.vocab_size != real.vocab_size:
        raise InputError("corpora use different vocabularies")
    return total_variation(ngram_distribution(generated, order),
                           ngram_distribution(real, order))


def unigram_entropy(generated: CorpusStore) -> float:
    """Shannon entropy (nats) of the pooled token frequencies."""
    dist = ngram_distribution(generated, 1)
    nz = dist[dist > 0]
    return float(-(nz * np.log(nz)).sum())


class _SparseCounts:
    """Counts over packed integer keys with vectorized lookup."""

    def __init__(self, keys: np.ndarray):
        self.keys, self.counts = np.unique(keys, return_counts=True)

    def get(self, query: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.keys, query)
        idx = np.minimum(idx, len(self.keys) - 1) if len(self.keys) else idx
        if len(self.keys) == 0:
            return np.zeros(query.shape, dtype=np.int64)
        found = self.keys[idx] == query
        return np.where(found, self.counts[idx], 0)


class ReferenceModel:
    """Order-2 Markov model with add-one smoothing, fit on a real corpus.

    Scores position 0 with the smoothed unigram, position 1 with the
    smoothed bigram conditional, and later positions with the trigram
    conditional. Unseen contexts degrade gracefully to uniform.
    """

    def __init__(self, corpus: CorpusStore):
        v = corpus.vocab_size
        self.vocab_size = v
        uni = _valid_ngrams(corpus, 1)[:, 0]
        bi = _valid_ngrams(corpus, 2)
        tri = _valid_ngrams(corpus, 3)
        self.total_tokens = uni.shape[0]
        self.uni = _SparseCounts(uni)
        self.bi = _SparseCounts(bi[:, 0] * v + bi[:, 1])
        self.bi_ctx = _SparseCounts(bi[:, 0])
        self.tri = _SparseCounts((tri[:, 0] * v + tri[:, 1]) * v + tri[:, 2])
        self.tri_ctx = _SparseCounts(tri[:, 0] * v + tri[:, 1])

    def mode_token(self) -> int:
        return int(self.uni.keys[np.argmax(self.uni.counts)])

    def sequence_nll(self, tokens: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
        """Total negative log-likelihood and token count for one corpus batch."""
        v = self.vocab_size
        nll = 0.0
        count = 0
        if mask[:, 0].any():
            sel = tokens[mask[:, 0], 0]
            num = self.uni.get(sel) + 1.0
            nll -= np.log(num / (self.total_tokens + v)).sum()
            count += sel.size
        if tokens.shape[1] >= 2:
            keep = mask[:, 0] & mask[:, 1]
            a, b = tokens[keep, 0], tokens[keep, 1]
            num = self.bi.get(a * v + b) + 1.0
            den = self.bi_ctx.get(a) + v
            nll -= np.log(num / den).sum()
            count += a.size
        if tokens.shape[1] >= 3:
            for k in range(2, tokens.shape[1]):
                keep = mask[:, k - 2] & mask[:, k - 1] & mask[:, k]
                a, b, c = tokens[keep, k - 2], tokens[keep, k - 1], tokens[keep, k]
                num = self.tri.get((a * v + b) * v + c) + 1.0
                den = self.tri_ctx.get(a * v + b) + v
                nll -= np.log(num / den).sum()
                count += a.size
        return nll, count


def reference_perplexity(generated: CorpusStore, ref: ReferenceModel) -> float:
    """exp of the mean per-token negative log-likelihood under the reference."""
    if generated.vocab_size != ref.vocab_size:
        raise InputError("generated corpus and reference use different vocabularies")
    nll, count = ref.sequence_nll(generated.tokens, generated.loss_mask)
    if count == 0:
        raise InputError("no scorable tokens in generated corpus")
    return float(np.exp(nll / count))


@dataclass
class EvalReport:
    entropy_nats: float
    ref_perplexity: float
    unigram_tv: float
    bigram_tv: float
    num_sequences: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(generated: CorpusStore, real: CorpusStore,
             ref: ReferenceModel | None = None) -> EvalReport:
    """Full report for a generated corpus against a real one."""
    if ref is None:
        ref = ReferenceModel(real)
    return EvalReport(
        entropy_nats=unigram_entropy(generated),
        ref_perplexity=reference_perplexity(generated, ref),
        unigram_tv=distribution_tv(generated, real, 1),
        bigram_tv=distribution_tv(generated, real, 2),
        num_sequences=generated.num_sequences,
    )
