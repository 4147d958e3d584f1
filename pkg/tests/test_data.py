import numpy as np
import pytest

from klflow.data import (
    CorpusStore,
    MarkovToyLanguage,
    Vocab,
    build_vocab,
    sample_toy_corpus,
    windows_from_text,
)
from klflow.errors import ConfigError, InputError


class TestVocab:
    def test_char_sorted_uniques(self):
        v = build_vocab("abba", "char")
        assert v.token_to_id == {"a": 0, "b": 1}
        assert v.size == 3  # two chars + reserved pad id
        assert v.pad_id == 2

    def test_byte_mode_fixed_size(self):
        assert build_vocab("anything", "byte").size == 256
        assert build_vocab("", "byte").size == 256

    def test_char_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            build_vocab("", "char")

    @pytest.mark.parametrize("mode", ["byte", "char"])
    def test_round_trip(self, mode):
        text = "the cat, el gato, die Katze 123"
        v = build_vocab(text, mode)
        assert v.decode(v.encode(text)) == text

    def test_byte_round_trip_multibyte_utf8(self):
        v = build_vocab("", "byte")
        text = "naïve ☃"
        assert v.decode(v.encode(text)) == text

    def test_json_round_trip(self):
        v = build_vocab("hello", "char")
        v2 = Vocab.from_json(v.to_json())
        assert v2.token_to_id == v.token_to_id
        assert v2.mode == v.mode

    def test_unknown_char_rejected(self):
        v = build_vocab("ab", "char")
        with pytest.raises(InputError):
            v.encode("abc")


class TestWindows:
    def test_exact_multiple(self):
        v = build_vocab("abcd", "char")
        store = windows_from_text("abcdabcd", v, seq_len=4)
        assert store.tokens.shape == (2, 4)
        assert store.loss_mask.all()

    def test_padding_and_mask(self):
        v = build_vocab("abc", "char")
        store = windows_from_text("abcab", v, seq_len=4)
        assert store.tokens.shape == (2, 4)
        np.testing.assert_array_equal(store.loss_mask[1], [True, False, False, False])
        assert store.tokens[1, 1] == v.pad_id

    def test_document_separator_not_crossed(self):
        v = build_vocab("ab|", "char")
        store = windows_from_text("aa|bb", v, seq_len=4, doc_separator="|")
        # two docs of two tokens each, each padded to 4; no window mixes docs
        assert store.tokens.shape == (2, 4)
        assert {tuple(r[:2]) for r in store.tokens.tolist()} == {(0, 0), (1, 1)}
        np.testing.assert_array_equal(store.loss_mask[:, 2:], False)

    def test_flat_tokens_excludes_pad(self):
        v = build_vocab("ab", "char")
        store = windows_from_text("aba", v, seq_len=2)
        assert len(store.flat_tokens()) == 3


class TestMarkovToyLanguage:
    def test_row_normalization_enforced(self):
        bad = np.full((2, 2, 2), 0.4)
        with pytest.raises(ConfigError):
            MarkovToyLanguage(transitions=bad)

    def test_deterministic_chain_all_sequences_identical(self):
        v = 3
        t = np.zeros((v, v, v))
        t[:, :, 1] = 1.0  # always emit token 1
        lang = MarkovToyLanguage(transitions=t)
        corpus = sample_toy_corpus(lang, 10, 6, np.random.default_rng(0))
        assert (corpus.tokens[:, 2:] == 1).all()
        assert (corpus.tokens == corpus.tokens[0]).all()

    def test_fixed_seed_bit_identical(self):
        lang = MarkovToyLanguage.random(4, seed=9)
        a = sample_toy_corpus(lang, 50, 8, np.random.default_rng(123))
        b = sample_toy_corpus(lang, 50, 8, np.random.default_rng(123))
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_empirical_transitions_match_tensor(self):
        lang = MarkovToyLanguage.random(3, seed=4)
        corpus = sample_toy_corpus(lang, 10**5, 6, np.random.default_rng(5))
        toks = corpus.tokens
        counts = np.zeros((3, 3, 3))
        for k in range(2, 6):
            np.add.at(counts, (toks[:, k - 2], toks[:, k - 1], toks[:, k]), 1.0)
        ctx_totals = counts.sum(axis=-1, keepdims=True)
        emp = counts / np.maximum(ctx_totals, 1)
        visited = ctx_totals[..., 0] > 500
        tv = 0.5 * np.abs(emp - lang.transitions).sum(axis=-1)
        assert tv[visited].max() < 0.05
        # pooled bigram distribution matches the stationary pair law
        big = np.zeros((3, 3))
        for k in range(1, 6):
            np.add.at(big, (toks[:, k - 1], toks[:, k]), 1.0)
        big /= big.sum()
        assert 0.5 * np.abs(big - lang.true_bigram_distribution()).sum() < 0.01

    def test_stationary_pair_distribution_is_invariant(self):
        lang = MarkovToyLanguage.random(4, seed=10)
        pi = lang.stationary_pair_distribution()
        v = 4
        # push one step: pi'(b,c) = sum_a pi(a,b) T[a,b,c]
        pushed = np.einsum("ab,abc->bc", pi, lang.transitions)
        np.testing.assert_allclose(pushed, pi, atol=1e-10)

    def test_json_round_trip(self):
        lang = MarkovToyLanguage.random(3, seed=2)
        lang2 = MarkovToyLanguage.from_json(lang.to_json())
        np.testing.assert_allclose(lang2.transitions, lang.transitions)


class TestCorpusStore:
    def test_batch_sampling_deterministic(self):
        store = CorpusStore(np.arange(20).reshape(5, 4) % 7, vocab_size=7)
        a = store.sample_batch(3, np.random.default_rng(1))
        b = store.sample_batch(3, np.random.default_rng(1))
        np.testing.assert_array_equal(a[0], b[0])

    def test_vocab_bound_checked(self):
        with pytest.raises(InputError):
            CorpusStore(np.array([[9]]), vocab_size=4)
