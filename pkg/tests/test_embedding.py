"""Tests for vocabulary construction, CBOW training, lookup, and checkpoints."""

import numpy as np
import pytest

from emocnn.corpus import DataError, Document, LabeledDataset, synth_corpus
from emocnn.embedding import (
    CbowConfig,
    build_vocab,
    embed_lookup,
    init_random_embeddings,
    load_embeddings,
    save_embeddings,
    train_cbow,
)


def dataset_from_texts(texts, label=0):
    docs = [
        Document(tokens=tuple(t.split()), label=label, source_id=str(i))
        for i, t in enumerate(texts)
    ]
    return LabeledDataset.from_documents(docs)


class TestBuildVocab:
    def test_min_count_filters_into_unk(self):
        vocab = build_vocab(dataset_from_texts(["a a b"]), min_count=2)
        assert len(vocab) == 2
        assert vocab.index("a") == 1
        assert vocab.index("b") == 0  # below threshold -> unknown slot

    def test_counts_every_word_when_min_count_one(self):
        vocab = build_vocab(dataset_from_texts(["x y"]), min_count=1)
        assert len(vocab) == 3

    def test_count_ties_break_lexicographically(self):
        vocab = build_vocab(dataset_from_texts(["b a b a"]), min_count=1)
        assert vocab.index("a") < vocab.index("b")

    def test_ordered_by_descending_count(self):
        vocab = build_vocab(dataset_from_texts(["z z z y y x"]), min_count=1)
        assert vocab.index("z") == 1
        assert vocab.index("y") == 2
        assert vocab.index("x") == 3

    def test_round_trip_indices(self):
        vocab = build_vocab(dataset_from_texts(["red green blue red"]), min_count=1)
        for word in ("red", "green", "blue"):
            assert vocab.index_to_word[vocab.word_to_index[word]] == word

    def test_all_below_threshold_rejected(self):
        with pytest.raises(ValueError):
            build_vocab(dataset_from_texts(["a b c"]), min_count=5)


class TestRandomEmbeddings:
    def test_range_and_shape(self):
        vocab = build_vocab(dataset_from_texts(["a b c d e f g h i"]), min_count=1)
        table = init_random_embeddings(vocab, dim=8, seed=0)
        assert table.vectors.shape == (10, 8)
        assert np.all(np.abs(table.vectors) <= 0.5 / 8)

    def test_seed_determinism(self):
        vocab = build_vocab(dataset_from_texts(["a b c"]), min_count=1)
        a = init_random_embeddings(vocab, dim=4, seed=9)
        b = init_random_embeddings(vocab, dim=4, seed=9)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_different_seeds_differ(self):
        vocab = build_vocab(dataset_from_texts(["a b c"]), min_count=1)
        a = init_random_embeddings(vocab, dim=4, seed=9)
        b = init_random_embeddings(vocab, dim=4, seed=10)
        assert np.any(a.vectors != b.vectors)


class TestTrainCbow:
    def tiny_config(self, **overrides):
        base = dict(window=2, dim=4, negatives=3, epochs=1, learning_rate=0.05,
                    min_count=1, seed=7)
        base.update(overrides)
        return CbowConfig(**base)

    def test_output_shape_and_finiteness(self):
        ds = dataset_from_texts(["a b c d e", "c d e a b"])
        vocab = build_vocab(ds, min_count=1)
        table = train_cbow(ds, vocab, self.tiny_config())
        assert table.vectors.shape == (len(vocab), 4)
        assert np.all(np.isfinite(table.vectors))

    def test_objective_decreases_over_epochs(self):
        ds = synth_corpus(n_per_class=40, vocab_size=24, doc_len=12,
                          signal_strength=1.0, seed=3)
        vocab = build_vocab(ds, min_count=1)
        table = train_cbow(ds, vocab, self.tiny_config(epochs=2, dim=8))
        assert table.train_objective is not None
        assert table.train_objective[1] <= table.train_objective[0]

    def test_deterministic_given_seed(self):
        ds = dataset_from_texts(["a b c d", "d c b a", "b d a c"])
        vocab = build_vocab(ds, min_count=1)
        a = train_cbow(ds, vocab, self.tiny_config())
        b = train_cbow(ds, vocab, self.tiny_config())
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_same_pool_words_end_up_more_similar(self):
        # On a fully separable corpus, keywords of one class share contexts,
        # keywords of different classes never co-occur.
        ds = synth_corpus(n_per_class=60, vocab_size=24, doc_len=12,
                          signal_strength=1.0, seed=3)
        vocab = build_vocab(ds, min_count=1)
        table = train_cbow(ds, vocab, self.tiny_config(epochs=3, dim=8))

        def mean_cosine(pairs):
            sims = []
            for w1, w2 in pairs:
                v1 = table.vectors[vocab.index(w1)]
                v2 = table.vectors[vocab.index(w2)]
                sims.append(v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2)))
            return float(np.mean(sims))

        pos = [w for w in vocab.index_to_word if w.startswith("pos")]
        neg = [w for w in vocab.index_to_word if w.startswith("neg")]
        same = [(a, b) for words in (pos, neg) for a in words for b in words if a < b]
        cross = [(a, b) for a in pos for b in neg]
        assert mean_cosine(same) > mean_cosine(cross)

    def test_no_context_pairs_rejected(self):
        ds = dataset_from_texts(["solo", "another"])
        vocab = build_vocab(ds, min_count=1)
        with pytest.raises(ValueError):
            train_cbow(ds, vocab, self.tiny_config())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CbowConfig(window=0)
        with pytest.raises(ValueError):
            CbowConfig(learning_rate=0.0)


class TestEmbedLookup:
    def setup_method(self):
        self.ds = dataset_from_texts(["one two three"])
        self.vocab = build_vocab(self.ds, min_count=1)
        self.table = init_random_embeddings(self.vocab, dim=2, seed=1)

    def test_rows_match_tokens(self):
        m = embed_lookup(self.vocab, self.table, ["one", "two", "three"], min_rows=3)
        assert m.shape == (3, 2)
        np.testing.assert_array_equal(m[0], self.table.vectors[self.vocab.index("one")])

    def test_short_sentence_padded_with_zero_rows(self):
        m = embed_lookup(self.vocab, self.table, ["one", "two"], min_rows=5)
        assert m.shape == (5, 2)
        np.testing.assert_array_equal(m[2:], np.zeros((3, 2)))

    def test_unknown_token_uses_reserved_row(self):
        m = embed_lookup(self.vocab, self.table, ["zebra"], min_rows=1)
        np.testing.assert_array_equal(m[0], self.table.vectors[0])

    def test_empty_tokens_rejected(self):
        with pytest.raises(ValueError):
            embed_lookup(self.vocab, self.table, [], min_rows=1)

    def test_row_count_contract(self):
        for tokens, min_rows in ((["one"], 4), (["one"] * 6, 4)):
            m = embed_lookup(self.vocab, self.table, tokens, min_rows=min_rows)
            assert m.shape[0] == max(len(tokens), min_rows)


class TestCheckpointRoundTrip:
    def test_round_trip(self, tmp_path):
        ds = dataset_from_texts(["alpha beta gamma alpha"])
        vocab = build_vocab(ds, min_count=1)
        table = init_random_embeddings(vocab, dim=6, seed=4)
        path = tmp_path / "embeddings.json"
        save_embeddings(path, vocab, table)
        vocab2, table2 = load_embeddings(path)
        assert vocab2.index_to_word == vocab.index_to_word
        np.testing.assert_array_equal(table2.vectors, table.vectors)

    def test_shape_validation(self, tmp_path):
        path = tmp_path / "embeddings.json"
        path.write_text(
            '{"version": 1, "dim": 3, "words": ["<unk>", "a"], "vectors": [0.0, 0.0]}',
            encoding="utf-8",
        )
        with pytest.raises(DataError, match="entries"):
            load_embeddings(path)

    def test_version_check(self, tmp_path):
        path = tmp_path / "embeddings.json"
        path.write_text('{"version": 99}', encoding="utf-8")
        with pytest.raises(DataError, match="version"):
            load_embeddings(path)
