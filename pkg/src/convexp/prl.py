"""Pseudo relevance labels (PRL) for historical query turns.

A historical turn ``h_i`` is labelled positive for turn ``n`` when expanding
``q_n`` with it strictly raises MRR of the retriever's ranked list.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .data import ConversationSession, Qrels, RankedList, query_key, tokenize
from .metrics import mrr

log = logging.getLogger(__name__)

SEP = " "


class Retriever(Protocol):
    def retrieve(self, text: str, k: int, qkey: str = "") -> RankedList: ...


@dataclass(frozen=True)
class PRLabel:
    session_id: str
    turn: int
    candidate: int
    label: bool
    base_score: float
    expanded_score: float

    def __post_init__(self):
        if not 1 <= self.candidate < self.turn:
            raise ValueError(f"candidate {self.candidate} must be in [1, {self.turn})")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.session_id, self.turn, self.candidate)


@dataclass(frozen=True)
class TermLabel:
    session_id: str
    turn: int
    term: str
    label: bool
    base_score: float
    expanded_score: float


@dataclass(frozen=True)
class ExpansionForm:
    """``raw``, ``all`` or ``prl`` (with one boolean per historical turn)."""

    variant: str
    labels: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.variant not in ("raw", "all", "prl"):
            raise ValueError(f"unknown expansion form {self.variant!r}")
        if (self.variant == "prl") != (self.labels is not None):
            raise ValueError("labels are required for, and only for, the prl form")

    @classmethod
    def raw(cls) -> "ExpansionForm":
        return cls("raw")

    @classmethod
    def all(cls) -> "ExpansionForm":
        return cls("all")

    @classmethod
    def prl(cls, labels: Sequence[bool]) -> "ExpansionForm":
        return cls("prl", tuple(bool(x) for x in labels))


def compose_query(session: ConversationSession, n: int, form: ExpansionForm) -> str:
    """Build the query text for turn ``n``; history always precedes ``q_n``."""
    current = session.turn(n).text
    history = [t.text for t in session.turns[: n - 1]]
    if form.variant == "prl" and len(form.labels) != n - 1:
        raise ValueError(f"turn {n} needs {n - 1} labels, got {len(form.labels)}")
    if n == 1 or form.variant == "raw":
        return current
    if form.variant == "all":
        chosen = history
    else:
        chosen = [h for h, keep in zip(history, form.labels) if keep]
    return SEP.join(chosen + [current])


def expand_with(current: str, extra: str) -> str:
    """Single-candidate expansion ``q_n ∘ h``: the current query comes first."""
    return current + SEP + extra


def _judged(qrels: Qrels, qkey: str) -> bool:
    return bool(qrels.relevant(qkey))


def generate_prl(
    session: ConversationSession,
    retriever: Retriever,
    qrels: Qrels,
    k: int = 100,
    skipped: list[str] | None = None,
) -> list[PRLabel]:
    """Turn-level gold PRL for every turn ``n >= 2`` of ``session``.

    Turns without relevant judgments cannot be scored; their keys are
    appended to ``skipped`` when given.
    """
    labels = []
    for n in range(2, len(session) + 1):
        qkey = query_key(session.session_id, n)
        if not _judged(qrels, qkey):
            log.debug("no judgments for %s, skipping", qkey)
            if skipped is not None:
                skipped.append(qkey)
            continue
        current = session.turn(n).text
        base = mrr(retriever.retrieve(current, k, qkey), qrels)
        for i in range(1, n):
            expanded = mrr(retriever.retrieve(expand_with(current, session.turn(i).text), k, qkey), qrels)
            labels.append(PRLabel(session.session_id, n, i, expanded > base, base, expanded))
    return labels


def generate_term_prl(
    session: ConversationSession,
    retriever: Retriever,
    qrels: Qrels,
    k: int = 100,
    skipped: list[str] | None = None,
) -> list[TermLabel]:
    """Term-level PRL: candidates are history tokens not already in ``q_n``."""
    labels = []
    for n in range(2, len(session) + 1):
        qkey = query_key(session.session_id, n)
        if not _judged(qrels, qkey):
            if skipped is not None:
                skipped.append(qkey)
            continue
        current = session.turn(n).text
        present = set(tokenize(current))
        candidates = []
        for turn in session.turns[: n - 1]:
            for tok in tokenize(turn.text):
                if tok not in present and tok not in candidates:
                    candidates.append(tok)
        if not candidates:
            continue
        base = mrr(retriever.retrieve(current, k, qkey), qrels)
        for term in candidates:
            expanded = mrr(retriever.retrieve(expand_with(current, term), k, qkey), qrels)
            labels.append(TermLabel(session.session_id, n, term, expanded > base, base, expanded))
    return labels


def labels_by_turn(labels: Iterable[PRLabel]) -> dict[tuple[str, int], tuple[bool, ...]]:
    """Group labels into ``(session_id, turn) -> (label_1, ..., label_{n-1})``."""
    grouped: dict[tuple[str, int], dict[int, bool]] = {}
    for lab in labels:
        grouped.setdefault((lab.session_id, lab.turn), {})[lab.candidate] = lab.label
    out = {}
    for (sid, n), by_cand in grouped.items():
        if sorted(by_cand) != list(range(1, n)):
            raise ValueError(f"incomplete labels for {sid} turn {n}")
        out[(sid, n)] = tuple(by_cand[i] for i in range(1, n))
    return out


def write_prl(labels: Iterable[PRLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in sorted(labels, key=lambda x: x.key):
            rec = asdict(lab)
            rec["label"] = "positive" if lab.label else "negative"
            fh.write(json.dumps(rec) + "\n")


def read_prl(path: str | Path) -> list[PRLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["label"] not in ("positive", "negative"):
                raise ValueError(f"{path}:{lineno}: label must be positive/negative")
            out.append(
                PRLabel(
                    rec["session_id"],
                    int(rec["turn"]),
                    int(rec["candidate"]),
                    rec["label"] == "positive",
                    float(rec["base_score"]),
                    float(rec["expanded_score"]),
                )
            )
    return out
