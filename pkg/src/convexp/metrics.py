"""Retrieval metrics with trec_eval semantics (grade >= 1 is relevant)."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .data import Qrels, RankedList


@dataclass(frozen=True)
class MetricSpec:
    kind: str  # "mrr", "ndcg", "recall"
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("mrr", "ndcg", "recall"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.k is not None and self.k < 1:
            raise ValueError("metric cutoff must be >= 1")
        if self.kind != "mrr" and self.k is None:
            raise ValueError(f"{self.kind} needs a cutoff")

    @property
    def name(self) -> str:
        if self.kind == "mrr":
            return "mrr" if self.k is None else f"mrr@{self.k}"
        return f"{self.kind}@{self.k}"

    @classmethod
    def parse(cls, text: str) -> "MetricSpec":
        m = re.fullmatch(r"(mrr|ndcg|recall)(?:@(\d+))?", text.strip().lower())
        if not m:
            raise ValueError(f"cannot parse metric {text!r}")
        return cls(m.group(1), int(m.group(2)) if m.group(2) else None)

    def __call__(self, ranked: RankedList, qrels: Qrels) -> float:
        if self.kind == "mrr":
            return mrr(ranked, qrels, self.k)
        if self.kind == "ndcg":
            return ndcg_at_k(ranked, qrels, self.k)
        return recall_at_k(ranked, qrels, self.k)


# metrics reported throughout the experiments
DEFAULT_METRICS = tuple(MetricSpec.parse(m) for m in ("mrr", "ndcg@3", "recall@10", "recall@20", "recall@100"))


def mrr(ranked: RankedList, qrels: Qrels, cutoff: int | None = None) -> float:
    """Reciprocal rank of the first relevant document (full depth if no cutoff)."""
    if cutoff is not None and cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    rel = qrels.relevant(ranked.query_key)
    entries = ranked.entries if cutoff is None else ranked.entries[:cutoff]
    for rank, (doc_id, _) in enumerate(entries, start=1):
        if doc_id in rel:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    """NDCG@k with linear gain ``grade / log2(rank + 1)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    judged = qrels.get(ranked.query_key, {})
    dcg = sum(judged.get(d, 0) / math.log2(i + 1) for i, (d, _) in enumerate(ranked.entries[:k], start=1))
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


def recall_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = qrels.relevant(ranked.query_key)
    if not rel:
        return 0.0
    hits = sum(1 for d, _ in ranked.entries[:k] if d in rel)
    return hits / len(rel)


@dataclass
class EvalReport:
    """Per-query metric values and their unweighted means."""

    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    no_judgments: list[str] = field(default_factory=list)  # queries without relevant docs
    missing: list[str] = field(default_factory=list)  # judged queries absent from the run

    def to_json(self) -> dict:
        metrics = list(self.means)
        out = {
            m: {"mean": self.means[m], "per_query": {q: v[m] for q, v in self.per_query.items()}}
            for m in metrics
        }
        out["_meta"] = {
            "num_queries": len(self.per_query),
            "no_judgments": self.no_judgments,
            "missing": self.missing,
        }
        return out

    def to_tsv(self) -> str:
        metrics = list(self.means)
        lines = ["query\t" + "\t".join(metrics)]
        for q in self.per_query:
            lines.append(q + "\t" + "\t".join(f"{self.per_query[q][m]:.6f}" for m in metrics))
        lines.append("all\t" + "\t".join(f"{self.means[m]:.6f}" for m in metrics))
        return "\n".join(lines) + "\n"

    def write(self, json_path: str | Path, tsv_path: str | Path | None = None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        if tsv_path is not None:
            Path(tsv_path).write_text(self.to_tsv(), encoding="utf-8")


def evaluate_run(
    run: Iterable[RankedList],
    qrels: Qrels,
    specs: Sequence[MetricSpec] = DEFAULT_METRICS,
) -> EvalReport:
    report = EvalReport()
    for ranked in run:
        q = ranked.query_key
        report.per_query[q] = {s.name: s(ranked, qrels) for s in specs}
        if not qrels.relevant(q):
            report.no_judgments.append(q)
    n = len(report.per_query)
    for s in specs:
        report.means[s.name] = sum(v[s.name] for v in report.per_query.values()) / n if n else 0.0
    report.missing = sorted(q for q in qrels if qrels.relevant(q) and q not in report.per_query)
    return report
