"""Inverted index with Okapi BM25 scoring."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Collection, DataError, RankedList, tokenize

INDEX_MAGIC = "convexp-bm25-index"
INDEX_VERSION = 1


@dataclass
class InvertedIndex:
    """BM25 index. Postings are ``term -> (positions, tfs)`` sorted by position."""

    doc_ids: list[str]
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    doc_len: np.ndarray
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        self.doc_len = np.asarray(self.doc_len, dtype=np.int64)
        n = len(self.doc_ids)
        self.avg_doc_len = float(self.doc_len.mean()) if n else 0.0
        # rank of each doc_id in lexicographic order, for tie-breaking
        order = sorted(range(n), key=self.doc_ids.__getitem__)
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[order] = np.arange(n)
        if n and self.avg_doc_len > 0:
            self._norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avg_doc_len)
        else:
            self._norm = np.full(n, self.k1, dtype=float)

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    def df(self, term: str) -> int:
        post = self.postings.get(term)
        return 0 if post is None else len(post[0])

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))

    def tf(self, term: str, doc_id: str) -> int:
        post = self.postings.get(term)
        if post is None:
            return 0
        pos = self.doc_ids.index(doc_id)
        hit = np.searchsorted(post[0], pos)
        if hit < len(post[0]) and post[0][hit] == pos:
            return int(post[1][hit])
        return 0

    def scores(self, query_tokens: Sequence[str]) -> np.ndarray:
        """Dense BM25 score vector over all documents."""
        out = np.zeros(self.num_docs)
        # unique terms in sorted order, so float sums do not depend on query word order
        for term in sorted(set(query_tokens)):
            post = self.postings.get(term)
            if post is None:
                continue
            pos, tf = post
            idf = self.idf(term)
            out[pos] += idf * tf * (self.k1 + 1.0) / (tf + self._norm[pos])
        return out

    def rank(self, scores: np.ndarray, k: int, qkey: str = "", keep_zero: bool = False) -> RankedList:
        """Top-k ranked list from a score vector (ties by ascending doc_id)."""
        cand = np.arange(self.num_docs) if keep_zero else np.flatnonzero(scores > 0)
        if len(cand) == 0:
            return RankedList(qkey)
        order = np.lexsort((self._id_rank[cand], -scores[cand]))[:k]
        top = cand[order]
        return RankedList(qkey, tuple((self.doc_ids[i], float(scores[i])) for i in top))


def build_index(collection: Collection, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    if k1 < 0 or not 0 <= b <= 1:
        raise ValueError(f"need k1 >= 0 and 0 <= b <= 1, got k1={k1}, b={b}")
    acc: dict[str, tuple[list[int], list[int]]] = {}
    doc_len = []
    for pos, doc in enumerate(collection):
        toks = tokenize(doc.text)
        doc_len.append(len(toks))
        for term, tf in Counter(toks).items():
            p, f = acc.setdefault(term, ([], []))
            p.append(pos)
            f.append(tf)
    postings = {
        t: (np.asarray(p, dtype=np.int64), np.asarray(f, dtype=np.int64)) for t, (p, f) in acc.items()
    }
    return InvertedIndex(collection.doc_ids, postings, np.asarray(doc_len), k1, b)


def bm25_retrieve(index: InvertedIndex, query_tokens: Sequence[str], k: int, qkey: str = "") -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.num_docs == 0 or not query_tokens:
        return RankedList(qkey)
    return index.rank(index.scores(query_tokens), k, qkey)


class BM25Retriever:
    """Text-in, ranked-list-out wrapper around an :class:`InvertedIndex`."""

    def __init__(self, index: InvertedIndex):
        self.index = index

    def retrieve(self, text: str, k: int, qkey: str = "") -> RankedList:
        return bm25_retrieve(self.index, tokenize(text), k, qkey)


def save_index(index: InvertedIndex, path: str | Path) -> None:
    doc = {
        "magic": INDEX_MAGIC,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "doc_ids": index.doc_ids,
        "doc_len": index.doc_len.tolist(),
        "postings": {t: [p.tolist(), f.tolist()] for t, (p, f) in sorted(index.postings.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("magic") != INDEX_MAGIC:
        raise DataError(f"{path}: not a BM25 index file")
    if doc.get("version") != INDEX_VERSION:
        raise DataError(f"{path}: index version {doc.get('version')} != {INDEX_VERSION}")
    postings = {
        t: (np.asarray(p, dtype=np.int64), np.asarray(f, dtype=np.int64)) for t, (p, f) in doc["postings"].items()
    }
    return InvertedIndex(doc["doc_ids"], postings, np.asarray(doc["doc_len"]), doc["k1"], doc["b"])
