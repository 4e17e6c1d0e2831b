"""Linear dual encoder over length-normalised term-frequency vectors.

``encode(tokens) = W @ tf(tokens) / max(1, len(tokens))`` with a trainable
query projection ``W_q`` and a passage projection ``W_p`` that no training
routine ever touches. Scores are dot products; search is exhaustive.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Collection, DataError, RankedList, tokenize

log = logging.getLogger(__name__)

ENCODER_VERSION = 1


@dataclass
class DenseEncoder:
    vocab: dict[str, int]
    W_q: np.ndarray
    W_p: np.ndarray

    def __post_init__(self):
        if self.W_q.shape != self.W_p.shape or self.W_q.shape[1] != len(self.vocab):
            raise ValueError("W_q and W_p must both be dim x |vocab|")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    def copy(self) -> "DenseEncoder":
        return DenseEncoder(dict(self.vocab), self.W_q.copy(), self.W_p.copy())

    def sparse_tf(self, tokens: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and normalised weights of the tf vector."""
        scale = 1.0 / max(1, len(tokens))
        counts = Counter(t for t in tokens if t in self.vocab)
        cols = np.fromiter((self.vocab[t] for t in counts), dtype=np.int64, count=len(counts))
        vals = np.fromiter(counts.values(), dtype=float, count=len(counts)) * scale
        return cols, vals


def init_encoder(
    collection: Collection,
    dim: int = 64,
    vocab_cap: int = 20000,
    seed: int = 0,
    scale: float = 6.0,
) -> DenseEncoder:
    """Vocabulary = the ``vocab_cap`` most frequent corpus terms; W_p ~ N(0, scale^2/dim), W_q = W_p."""
    counts = Counter()
    for doc in collection:
        counts.update(tokenize(doc.text))
    terms = sorted(counts, key=lambda t: (-counts[t], t))[:vocab_cap]
    vocab = {t: i for i, t in enumerate(terms)}
    rng = np.random.default_rng(seed)
    W_p = rng.normal(0.0, scale / np.sqrt(dim), size=(dim, len(vocab)))
    return DenseEncoder(vocab, W_p.copy(), W_p)


def encode(encoder: DenseEncoder, tokens: Sequence[str], side: str = "query") -> np.ndarray:
    if side not in ("query", "passage"):
        raise ValueError("side must be 'query' or 'passage'")
    W = encoder.W_q if side == "query" else encoder.W_p
    cols, vals = encoder.sparse_tf(tokens)
    return W[:, cols] @ vals


class PassageIndex:
    """Passage vectors of a collection under a (frozen) passage encoder."""

    def __init__(self, encoder: DenseEncoder, collection: Collection):
        self.collection = collection
        self.W_p = encoder.W_p
        self.matrix = np.stack([encode(encoder, tokenize(d.text), "passage") for d in collection]) if len(
            collection
        ) else np.zeros((0, encoder.dim))
        ids = collection.doc_ids
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    def check(self, encoder: DenseEncoder) -> None:
        if encoder.W_p is not self.W_p and not np.array_equal(encoder.W_p, self.W_p):
            raise ValueError("passage index was built with a different passage encoder")

    def vectors(self, doc_ids: Sequence[str]) -> np.ndarray:
        return self.matrix[[self.collection.position(d) for d in doc_ids]]

    def search(self, qvec: np.ndarray, k: int, qkey: str = "") -> RankedList:
        if len(self.collection) == 0:
            return RankedList(qkey)
        scores = self.matrix @ qvec
        order = np.lexsort((self._id_rank, -scores))[:k]
        ids = self.collection.doc_ids
        return RankedList(qkey, tuple((ids[i], float(scores[i])) for i in order))


def dense_retrieve(
    encoder: DenseEncoder,
    collection: Collection | PassageIndex,
    query_tokens: Sequence[str],
    k: int,
    qkey: str = "",
) -> RankedList:
    passages = collection if isinstance(collection, PassageIndex) else PassageIndex(encoder, collection)
    passages.check(encoder)
    return passages.search(encode(encoder, query_tokens, "query"), k, qkey)


class DenseRetriever:
    def __init__(self, encoder: DenseEncoder, passages: PassageIndex | Collection):
        self.encoder = encoder
        self.passages = passages if isinstance(passages, PassageIndex) else PassageIndex(encoder, passages)

    def retrieve(self, text: str, k: int, qkey: str = "") -> RankedList:
        return dense_retrieve(self.encoder, self.passages, tokenize(text), k, qkey)


# ---------------------------------------------------------------------------
# ranking loss and training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingBatch:
    query: str
    positive: str
    negatives: tuple[str, ...]

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("need at least one negative")
        if self.positive in self.negatives:
            raise ValueError("positive passage listed among negatives")


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def contrastive_terms(qvec: np.ndarray, pvecs: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(pvecs @ qvec)[0]`` and its gradient w.r.t. ``qvec``.

    Row 0 of ``pvecs`` is the positive passage.
    """
    s = pvecs @ qvec
    lse = _logsumexp(s)
    prob = np.exp(s - lse)
    prob[0] -= 1.0
    return lse - float(s[0]), pvecs.T @ prob


def _batch_loss(encoder: DenseEncoder, batch: TrainingBatch, passages: PassageIndex):
    cols, vals = encoder.sparse_tf(tokenize(batch.query))
    qvec = encoder.W_q[:, cols] @ vals
    pvecs = passages.vectors((batch.positive,) + tuple(batch.negatives))
    loss, g = contrastive_terms(qvec, pvecs)
    return loss, g, cols, vals


def ranking_loss(encoder: DenseEncoder, batch: TrainingBatch, passages: PassageIndex) -> tuple[float, np.ndarray]:
    """Contrastive ranking loss of one query and its dense gradient w.r.t. ``W_q``."""
    passages.check(encoder)
    loss, g, cols, vals = _batch_loss(encoder, batch, passages)
    grad = np.zeros_like(encoder.W_q)
    np.add.at(grad, (slice(None), cols), np.outer(g, vals))
    return loss, grad


def sample_negatives(
    collection: Collection,
    exclude: set[str],
    count: int,
    rng: np.random.Generator,
) -> tuple[str, ...]:
    """Uniform negatives without replacement, never from ``exclude``."""
    ids = collection.doc_ids
    avail = len(ids) - len(exclude & set(ids))
    if count > avail:
        raise ValueError(f"cannot sample {count} negatives from {avail} candidates")
    picked: list[str] = []
    while len(picked) < count:
        for i in rng.choice(len(ids), size=count - len(picked), replace=False):
            d = ids[i]
            if d not in exclude and d not in picked:
                picked.append(d)
    return tuple(picked)


def make_batches(
    pairs: Sequence[tuple[str, str]],
    collection: Collection,
    qrels_relevant: Sequence[set[str]] | None = None,
    num_negatives: int = 8,
    seed: int = 0,
) -> list[TrainingBatch]:
    """Turn ``(query_text, positive_id)`` pairs into batches with sampled negatives.

    ``qrels_relevant[i]`` lists further ids that must not be used as negatives
    for pair ``i``.
    """
    rng = np.random.default_rng(seed)
    batches = []
    for i, (query, pos) in enumerate(pairs):
        exclude = {pos} | (set(qrels_relevant[i]) if qrels_relevant is not None else set())
        batches.append(TrainingBatch(query, pos, sample_negatives(collection, exclude, num_negatives, rng)))
    return batches


def epoch_order(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def train_retriever(
    encoder: DenseEncoder,
    batches: Sequence[TrainingBatch],
    passages: PassageIndex,
    lr: float = 0.05,
    epochs: int = 10,
    seed: int = 0,
    history: list | None = None,
) -> DenseEncoder:
    """Per-example gradient descent on ``W_q``; returns a new encoder.

    Example order is reshuffled every epoch from ``seed``. ``history``
    receives the mean loss seen during each epoch.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    passages.check(encoder)
    enc = encoder.copy()
    enc.W_p = encoder.W_p  # shared and never written
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        total = 0.0
        for idx in epoch_order(rng, len(batches)):
            loss, g, cols, vals = _batch_loss(enc, batches[idx], passages)
            enc.W_q[:, cols] -= lr * np.outer(g, vals)
            total += loss
        mean = total / len(batches) if batches else 0.0
        log.debug("retriever epoch %d loss %.5f", epoch, mean)
        if history is not None:
            history.append({"epoch": epoch, "L_R": mean})
    return enc


def mean_ranking_loss(encoder: DenseEncoder, batches: Sequence[TrainingBatch], passages: PassageIndex) -> float:
    if not batches:
        return 0.0
    return float(np.mean([_batch_loss(encoder, b, passages)[0] for b in batches]))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_encoder(encoder: DenseEncoder, path: str | Path) -> None:
    terms = sorted(encoder.vocab, key=encoder.vocab.__getitem__)
    doc = {
        "version": ENCODER_VERSION,
        "dim": encoder.dim,
        "vocab": terms,
        "W_q": encoder.W_q.tolist(),
        "W_p": encoder.W_p.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_encoder(path: str | Path) -> DenseEncoder:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != ENCODER_VERSION:
        raise DataError(f"{path}: encoder version {doc.get('version')} != {ENCODER_VERSION}")
    vocab = {t: i for i, t in enumerate(doc["vocab"])}
    W_q = np.asarray(doc["W_q"], dtype=float).reshape(doc["dim"], len(vocab))
    W_p = np.asarray(doc["W_p"], dtype=float).reshape(doc["dim"], len(vocab))
    return DenseEncoder(vocab, W_q, W_p)
