"""Vocabulary indexing and CBOW word embeddings.

The vocabulary maps words to dense indices with ``<unk>`` reserved at
index 0 for out-of-vocabulary words. Embeddings are trained with the
continuous bag-of-words objective: the projection for a target position is
the *sum* of its context word vectors, scored against an output weight
table with negative sampling. Training is single-threaded and fully
deterministic for a fixed (corpus, config, seed); the finished table is
immutable and safe for concurrent reads.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import DataError, LabeledDataset, UNK_TOKEN
from .functions import LOG_EPS, _stable_sigmoid

EMBEDDING_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    index_to_word: tuple[str, ...]
    word_to_index: dict[str, int]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.index_to_word or self.index_to_word[0] != UNK_TOKEN:
            raise ValueError(f"index 0 must be the {UNK_TOKEN} token")

    def __len__(self) -> int:
        return len(self.index_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_index

    def index(self, word: str) -> int:
        """Dense index of `word`, or 0 (the unknown-word slot) if absent."""
        return self.word_to_index.get(word, 0)

    def indices(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)


@dataclass
class EmbeddingTable:
    """|V| x d matrix of word vectors; row i belongs to vocabulary index i."""

    vectors: np.ndarray
    train_objective: list[float] | None = None

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("embedding table must be a 2-D matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains non-finite entries")


@dataclass(frozen=True)
class CbowConfig:
    window: int = 2
    dim: int = 200
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.05
    min_count: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for name in ("dim", "negatives", "epochs", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")


def build_vocab(dataset: LabeledDataset, min_count: int = 1) -> Vocabulary:
    """Index words with frequency >= min_count, rarer ones map to ``<unk>``.

    Indices are assigned by descending count, ties broken lexicographically,
    starting at 1 (index 0 is reserved).
    """
    if dataset.n == 0:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    freq = Counter()
    for doc in dataset.documents:
        freq.update(doc.tokens)
    kept = sorted(
        (w for w, c in freq.items() if c >= min_count),
        key=lambda w: (-freq[w], w),
    )
    if not kept:
        raise ValueError(f"no word reaches min_count={min_count}; vocabulary would be empty")
    unk_count = sum(c for w, c in freq.items() if c < min_count)
    index_to_word = (UNK_TOKEN,) + tuple(kept)
    return Vocabulary(
        index_to_word=index_to_word,
        word_to_index={w: i for i, w in enumerate(index_to_word)},
        counts=(unk_count,) + tuple(freq[w] for w in kept),
    )


def init_random_embeddings(vocab: Vocabulary, dim: int, seed: int) -> EmbeddingTable:
    """Uniform random table on [-0.5/dim, 0.5/dim], deterministic per seed."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-0.5 / dim, 0.5 / dim, size=(len(vocab), dim))
    return EmbeddingTable(vectors=vectors)


def _noise_table(vocab: Vocabulary) -> np.ndarray:
    """Cumulative unigram^0.75 distribution for negative sampling."""
    weights = np.asarray(vocab.counts, dtype=np.float64) ** 0.75
    if weights.sum() == 0:
        weights = np.ones(len(vocab))
    return np.cumsum(weights / weights.sum())


def train_cbow(dataset: LabeledDataset, vocab: Vocabulary, config: CbowConfig) -> EmbeddingTable:
    """Train CBOW vectors with negative sampling over the dataset.

    For every position the projection h is the sum of the up-to-2*window
    surrounding word vectors; h is scored against the target word and
    `negatives` noise words through a sigmoid, and both vector tables get
    plain SGD updates. Returns the input-vector table with the mean
    per-pair objective of each epoch recorded on it.
    """
    dim = config.dim
    rng = np.random.default_rng(config.seed)
    vectors = rng.uniform(-0.5 / dim, 0.5 / dim, size=(len(vocab), dim))
    out_weights = np.zeros((len(vocab), dim))
    cumulative = _noise_table(vocab)
    lr = config.learning_rate
    window = config.window

    docs_idx = [vocab.indices(doc.tokens) for doc in dataset.documents]
    if all(len(idx) < 2 for idx in docs_idx):
        raise ValueError("no context pairs: every document is shorter than 2 tokens")

    objective: list[float] = []
    labels = np.zeros(1 + config.negatives)
    labels[0] = 1.0
    for _ in range(config.epochs):
        total = 0.0
        pairs = 0
        for idx in docs_idx:
            length = len(idx)
            if length < 2:
                continue
            for pos in range(length):
                target = idx[pos]
                lo = max(0, pos - window)
                ctx = np.concatenate([idx[lo:pos], idx[pos + 1 : pos + 1 + window]])
                h = vectors[ctx].sum(axis=0)

                draws = np.searchsorted(cumulative, rng.random(config.negatives))
                candidates = np.concatenate([[target], draws[draws != target]])
                cand_labels = labels[: len(candidates)]
                w = out_weights[candidates]
                scores = _stable_sigmoid(w @ h)
                total += -float(
                    np.log(max(scores[0], LOG_EPS))
                    + np.log(np.maximum(1.0 - scores[1:], LOG_EPS)).sum()
                )
                g = scores - cand_labels
                grad_h = g @ w
                np.subtract.at(out_weights, candidates, lr * np.outer(g, h))
                np.subtract.at(vectors, ctx, lr * grad_h)
                pairs += 1
        if not np.all(np.isfinite(vectors)) or not np.all(np.isfinite(out_weights)):
            raise ValueError("embedding training produced non-finite values")
        objective.append(total / pairs)
    return EmbeddingTable(vectors=vectors, train_objective=objective)


def embed_lookup(
    vocab: Vocabulary,
    table: EmbeddingTable,
    tokens,
    min_rows: int = 1,
) -> np.ndarray:
    """Stack the word vectors of `tokens` into an L x d sentence matrix.

    Unknown words use row 0. When the sentence is shorter than `min_rows`
    (the widest convolution filter), zero rows are appended so every filter
    has at least one valid position.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot embed an empty token list")
    matrix = table.vectors[vocab.indices(tokens)]
    if len(tokens) < min_rows:
        pad = np.zeros((min_rows - len(tokens), table.dim))
        matrix = np.vstack([matrix, pad])
    return matrix


def save_embeddings(path: str | Path, vocab: Vocabulary, table: EmbeddingTable) -> None:
    """Write the versioned embedding checkpoint."""
    if len(vocab) != table.vectors.shape[0]:
        raise ValueError("vocabulary and table row count disagree")
    payload = {
        "version": EMBEDDING_SCHEMA_VERSION,
        "dim": table.dim,
        "words": list(vocab.index_to_word),
        "vectors": [float(v) for v in table.vectors.ravel()],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_embeddings(path: str | Path) -> tuple[Vocabulary, EmbeddingTable]:
    src = Path(path)
    if not src.is_file():
        raise DataError(f"embedding checkpoint not found: {src}")
    try:
        payload = json.loads(src.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse embedding checkpoint {src}: {exc}") from exc
    if payload.get("version") != EMBEDDING_SCHEMA_VERSION:
        raise DataError(f"{src}: unsupported embedding checkpoint version")
    words = payload.get("words")
    dim = payload.get("dim")
    flat = payload.get("vectors")
    if not words or not isinstance(dim, int) or flat is None:
        raise DataError(f"{src}: embedding checkpoint missing fields")
    if len(flat) != len(words) * dim:
        raise DataError(
            f"{src}: expected {len(words) * dim} vector entries, found {len(flat)}"
        )
    vectors = np.asarray(flat, dtype=np.float64).reshape(len(words), dim)
    vocab = Vocabulary(
        index_to_word=tuple(words),
        word_to_index={w: i for i, w in enumerate(words)},
        counts=tuple(0 for _ in words),
    )
    return vocab, EmbeddingTable(vectors=vectors)
