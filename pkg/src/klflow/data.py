"""Corpus ingestion and synthetic toy languages.

Byte-level tokenization is the default (V=256, zero external assets). Char
mode builds a vocabulary from the corpus and reserves one extra id as the
pad token. Toy corpora come from an order-2 Markov chain whose transition
tensor is known exactly, so generation quality can be scored against ground
truth instead of a held-out sample.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

BYTE_PAD_ID = 0x00


@dataclass
class Vocab:
    mode: str  # "byte" | "char"
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("byte", "char"):
            raise ConfigError(f"unknown vocab mode {self.mode!r}")
        if self.mode == "char":
            self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @property
    def size(self) -> int:
        if self.mode == "byte":
            return 256
        return len(self.token_to_id) + 1  # last id reserved for padding

    @property
    def pad_id(self) -> int:
        return BYTE_PAD_ID if self.mode == "byte" else self.size - 1

    def encode(self, text: str) -> np.ndarray:
        if self.mode == "byte":
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        try:
            return np.array([self.token_to_id[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise InputError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: np.ndarray) -> str:
        ids = np.asarray(ids)
        if self.mode == "byte":
            return bytes(int(i) for i in ids).decode("utf-8", errors="replace")
        return "".join(self.id_to_token.get(int(i), "") for i in ids)

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "token_to_id": self.token_to_id})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        return cls(mode=obj["mode"], token_to_id=obj.get("token_to_id", {}))


def build_vocab(text: str, mode: str = "byte") -> Vocab:
    """Byte mode ignores the text entirely; char mode maps sorted unique
    code points to dense ids."""
    if mode == "byte":
        return Vocab(mode="byte")
    if not text:
        raise InputError("char vocab needs a non-empty corpus")
    chars = sorted(set(text))
    return Vocab(mode="char", token_to_id={c: i for i, c in enumerate(chars)})


@dataclass
class CorpusStore:
    """Fixed-length token windows ready for batching.

    ``tokens`` is (num_sequences, S); ``loss_mask`` is False at padded
    positions (those are excluded from training loss and metrics).
    """

    tokens: np.ndarray
    vocab_size: int
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise InputError("corpus tokens must be (num_sequences, S)")
        if self.tokens.size and self.tokens.max() >= self.vocab_size:
            raise InputError("corpus contains token id >= vocab_size")
        if self.loss_mask is None:
            self.loss_mask = np.ones_like(self.tokens, dtype=bool)
        else:
            self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
            if self.loss_mask.shape != self.tokens.shape:
                raise InputError("loss mask shape must match tokens")

    @property
    def num_sequences(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def sample_batch(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self.num_sequences, size=batch_size)
        return self.tokens[idx], self.loss_mask[idx]

    def flat_tokens(self) -> np.ndarray:
        """All non-pad tokens pooled into one vector."""
        return self.tokens[self.loss_mask]


def windows_from_text(text: str, vocab: Vocab, seq_len: int,
                      doc_separator: str | None = None) -> CorpusStore:
    """Chop a corpus into S-token windows.

    With a document separator configured, windows never straddle documents;
    a short tail document is padded and its pad positions masked out.
    """
    if seq_len < 1:
        raise InputError("seq_len must be >= 1")
    docs = text.split(doc_separator) if doc_separator else [text]
    rows, masks = [], []
    pad = vocab.pad_id
    for doc in docs:
        ids = vocab.encode(doc)
        if ids.size == 0:
            continue
        for start in range(0, len(ids), seq_len):
            window = ids[start:start + seq_len]
            mask = np.ones(seq_len, dtype=bool)
            if len(window) < seq_len:
                mask[len(window):] = False
                window = np.concatenate([window, np.full(seq_len - len(window), pad)])
            rows.append(window)
            masks.append(mask)
    if not rows:
        raise InputError("corpus produced no windows")
    return CorpusStore(np.stack(rows), vocab.size, np.stack(masks))


@dataclass
class MarkovToyLanguage:
    """Order-2 Markov chain over V states with a known transition tensor.

    ``transitions[a, b]`` is the distribution of the next token after the
    pair (a, b). Sequences start from the stationary distribution of the
    pair process, so every window is a slice of the stationary chain.
    """

    transitions: np.ndarray
    seed: int = 0
    order: int = 2

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.order != 2:
            raise ConfigError("only order-2 toy languages are supported")
        v = self.transitions.shape[0]
        if self.transitions.shape != (v, v, v):
            raise ConfigError("transition tensor must be V x V x V")
        rows = self.transitions.reshape(v * v, v)
        if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("each conditional row must sum to 1")
        if (self.transitions < 0).any():
            raise ConfigError("transition probabilities must be nonnegative")

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[0]

    @classmethod
    def random(cls, vocab_size: int, seed: int, concentration: float = 0.3) -> "MarkovToyLanguage":
        """Rows drawn from a symmetric Dirichlet; low concentration gives
        peaked, learnable structure."""
        rng = np.random.default_rng(seed)
        t = rng.dirichlet(np.full(vocab_size, concentration), size=(vocab_size, vocab_size))
        return cls(transitions=t, seed=seed)

    def stationary_pair_distribution(self) -> np.ndarray:
        """Stationary distribution of the (previous, current) pair chain,
        shape (V, V); this is also the chain's true bigram distribution."""
        v = self.vocab_size
        # Pair chain: (a,b) -> (b,c) with prob transitions[a,b,c].
        p = np.zeros((v * v, v * v))
        for a in range(v):
            for b in range(v):
                p[a * v + b, b * v:(b + 1) * v] = self.transitions[a, b]
        # Power iteration; the chain is finite and (for generic tensors) ergodic.
        pi = np.full(v * v, 1.0 / (v * v))
        for _ in range(10_000):
            nxt = pi @ p
            if np.abs(nxt - pi).max() < 1e-14:
                pi = nxt
                break
            pi = nxt
        pi = np.maximum(pi, 0)
        return (pi / pi.sum()).reshape(v, v)

    def true_bigram_distribution(self) -> np.ndarray:
        return self.stationary_pair_distribution()

    def true_unigram_distribution(self) -> np.ndarray:
        return self.stationary_pair_distribution().sum(axis=0)

    def to_json(self) -> str:
        return json.dumps({
            "order": self.order,
            "V": self.vocab_size,
            "transitions": self.transitions.tolist(),
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "MarkovToyLanguage":
        obj = json.loads(text)
        return cls(transitions=np.array(obj["transitions"]), seed=obj.get("seed", 0),
                   order=obj.get("order", 2))


def sample_toy_corpus(lang: MarkovToyLanguage, num_sequences: int, seq_len: int,
                      rng: np.random.Generator | None = None) -> CorpusStore:
    """Draw sequences from the chain started at its stationary pair law."""
    if seq_len < 2:
        raise InputError("toy corpus sequences need seq_len >= 2")
    if rng is None:
        rng = np.random.default_rng(lang.seed)
    v = lang.vocab_size
    pair_pi = lang.stationary_pair_distribution().reshape(-1)
    pair_cdf = np.cumsum(pair_pi)
    out = np.empty((num_sequences, seq_len), dtype=np.int64)
    start = np.searchsorted(pair_cdf, rng.random(num_sequences), side="right")
    out[:, 0] = start // v
    out[:, 1] = start % v
    trans_cdf = np.cumsum(lang.transitions, axis=-1)
    for k in range(2, seq_len):
        rows = trans_cdf[out[:, k - 2], out[:, k - 1]]
        u = rng.random(num_sequences)
        out[:, k] = (u[:, None] >= rows).sum(axis=1).clip(0, v - 1)
    return CorpusStore(out, vocab_size=v)
