"""Core data types, tokenization and file I/O.

File formats:

* corpus   - JSON Lines, ``{"id": str, "text": str}``
* sessions - JSON Lines, ``{"session_id": str, "turns": [{"text": str}, ...]}``
* qrels    - TREC qrels, ``query_key 0 doc_id grade``
* runs     - TREC run, ``query_key Q0 doc_id rank score run_tag``
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

_SPLIT = re.compile(r"[^0-9a-z]+")


class DataError(ValueError):
    """Raised for malformed or inconsistent input files."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [tok for tok in _SPLIT.split(text.lower()) if tok]


def query_key(session_id: str, turn_index: int) -> str:
    if turn_index < 1:
        raise ValueError(f"turn_index must be >= 1, got {turn_index}")
    return f"{session_id}_{turn_index}"


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("doc_id must be non-empty")


class Collection:
    """Ordered, immutable set of documents with id lookup."""

    def __init__(self, docs: Iterable[Document] = ()):
        self._docs: tuple[Document, ...] = tuple(docs)
        self._lookup: dict[str, int] = {}
        for pos, doc in enumerate(self._docs):
            if doc.doc_id in self._lookup:
                raise DataError(f"duplicate doc_id {doc.doc_id!r}")
            self._lookup[doc.doc_id] = pos

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __getitem__(self, pos: int) -> Document:
        return self._docs[pos]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._lookup

    def __eq__(self, other) -> bool:
        return isinstance(other, Collection) and self._docs == other._docs

    @property
    def docs(self) -> tuple[Document, ...]:
        return self._docs

    def position(self, doc_id: str) -> int:
        return self._lookup[doc_id]

    def get(self, doc_id: str) -> Document:
        return self._docs[self._lookup[doc_id]]

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self._docs]


@dataclass(frozen=True)
class QueryTurn:
    session_id: str
    turn_index: int
    text: str

    @property
    def key(self) -> str:
        return query_key(self.session_id, self.turn_index)


@dataclass(frozen=True)
class ConversationSession:
    session_id: str
    turns: tuple[QueryTurn, ...]

    def __post_init__(self):
        if not self.turns:
            raise DataError(f"session {self.session_id!r} has no turns")
        for i, turn in enumerate(self.turns, start=1):
            if turn.session_id != self.session_id or turn.turn_index != i:
                raise DataError(
                    f"session {self.session_id!r}: turn {i} has "
                    f"({turn.session_id!r}, {turn.turn_index})"
                )

    @classmethod
    def from_texts(cls, session_id: str, texts: Sequence[str]) -> "ConversationSession":
        turns = tuple(QueryTurn(session_id, i, t) for i, t in enumerate(texts, start=1))
        return cls(session_id, turns)

    def __len__(self) -> int:
        return len(self.turns)

    def turn(self, n: int) -> QueryTurn:
        """Return turn ``n`` (1-based)."""
        if not 1 <= n <= len(self.turns):
            raise IndexError(f"turn {n} out of range 1..{len(self.turns)}")
        return self.turns[n - 1]

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.turns]


class Qrels(dict):
    """``query_key -> {doc_id: grade}`` relevance judgments."""

    def grade(self, qkey: str, doc_id: str) -> int:
        return self.get(qkey, {}).get(doc_id, 0)

    def relevant(self, qkey: str) -> dict[str, int]:
        """Judged documents with grade >= 1."""
        return {d: g for d, g in self.get(qkey, {}).items() if g >= 1}

    def set(self, qkey: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise DataError(f"negative grade {grade} for ({qkey}, {doc_id})")
        self.setdefault(qkey, {})[doc_id] = int(grade)


@dataclass(frozen=True)
class RankedList:
    """Ranked retrieval result for one query.

    Scores are non-increasing and ties are ordered by ascending doc_id.
    """

    query_key: str
    entries: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        seen = set()
        prev = None
        for doc_id, score in self.entries:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r} in ranked list")
            seen.add(doc_id)
            if prev is not None and (score > prev[1] or (score == prev[1] and doc_id < prev[0])):
                raise ValueError("ranked list is not sorted by (-score, doc_id)")
            prev = (doc_id, score)

    @classmethod
    def from_scores(cls, qkey: str, scores: dict[str, float], k: int | None = None) -> "RankedList":
        ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(qkey, tuple((d, float(s)) for d, s in ordered))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def truncate(self, k: int) -> "RankedList":
        return RankedList(self.query_key, self.entries[:k])

    def with_key(self, qkey: str) -> "RankedList":
        return RankedList(qkey, self.entries)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _jsonl_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_corpus(path: str | Path) -> Collection:
    docs = []
    seen = set()
    for lineno, obj in _jsonl_records(path):
        doc_id, text = obj.get("id"), obj.get("text")
        if not isinstance(doc_id, str) or not doc_id or not isinstance(text, str):
            raise DataError(f"{path}:{lineno}: need string fields 'id' and 'text'")
        if doc_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        docs.append(Document(doc_id, text))
    return Collection(docs)


def load_sessions(path: str | Path) -> list[ConversationSession]:
    sessions = []
    seen = set()
    for lineno, obj in _jsonl_records(path):
        sid, turns = obj.get("session_id"), obj.get("turns")
        if not isinstance(sid, str) or not isinstance(turns, list) or not turns:
            raise DataError(f"{path}:{lineno}: need 'session_id' and a non-empty 'turns' list")
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate session_id {sid!r}")
        seen.add(sid)
        texts = []
        for turn in turns:
            if not isinstance(turn, dict) or not isinstance(turn.get("text"), str):
                raise DataError(f"{path}:{lineno}: every turn needs a string 'text'")
            texts.append(turn["text"])
        sessions.append(ConversationSession.from_texts(sid, texts))
    return sessions


def load_qrels(path: str | Path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'query_key 0 doc_id grade'")
            try:
                grade = int(parts[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade {parts[3]!r} is not an integer") from None
            if grade < 0:
                raise DataError(f"{path}:{lineno}: negative grade")
            qrels.set(parts[0], parts[2], grade)  # last wins
    return qrels


def load_run(path: str | Path) -> list[RankedList]:
    """Read a TREC run file; entries are re-sorted by (-score, doc_id)."""
    per_query: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 'qid Q0 doc rank score tag'")
            try:
                score = float(parts[4])
                int(parts[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rank or score") from None
            docs = per_query.setdefault(parts[0], {})
            if parts[2] in docs:
                raise DataError(f"{path}:{lineno}: duplicate doc {parts[2]!r} for {parts[0]!r}")
            docs[parts[2]] = score
    return [RankedList.from_scores(q, scores) for q, scores in per_query.items()]


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def write_corpus(collection: Collection, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in collection:
            fh.write(json.dumps({"id": doc.doc_id, "text": doc.text}) + "\n")


def write_sessions(sessions: Iterable[ConversationSession], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            rec = {"session_id": s.session_id, "turns": [{"text": t.text} for t in s.turns]}
            fh.write(json.dumps(rec) + "\n")


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qkey in sorted(qrels):
            for doc_id in sorted(qrels[qkey]):
                fh.write(f"{qkey} 0 {doc_id} {qrels[qkey][doc_id]}\n")


def write_run(run: Iterable[RankedList], path: str | Path, tag: str = "convexp") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in run:
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                fh.write(f"{ranked.query_key} Q0 {doc_id} {rank} {float(score)!r} {tag}\n")
