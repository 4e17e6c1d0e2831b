"""Topic-switch analysis over per-turn relevance labels.

A turn is a *no-switch* when its immediate predecessor is relevant, a
*topic shift* when no earlier turn is relevant and a *topic return* when
only some turn before the predecessor is.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import RankedList, Qrels
from .metrics import mrr


class SwitchType(str, Enum):
    TOPIC_SHIFT = "TopicShift"
    TOPIC_RETURN = "TopicReturn"
    NO_SWITCH = "NoSwitch"


TurnLabels = Mapping[tuple[str, int], Sequence[bool]]


def classify_switch(labels: Sequence[bool]) -> SwitchType:
    """Switch type of turn ``n`` from the ``n - 1`` labels of its history."""
    if len(labels) == 0:
        raise ValueError("turn 1 has no history and is not classified")
    if labels[-1]:
        return SwitchType.NO_SWITCH
    if any(labels[:-1]):
        return SwitchType.TOPIC_RETURN
    return SwitchType.TOPIC_SHIFT


def topics_per_conversation(switches: Sequence[SwitchType]) -> int:
    return 1 + sum(1 for s in switches if s == SwitchType.TOPIC_SHIFT)


def switch_types(labels: TurnLabels) -> dict[tuple[str, int], SwitchType]:
    return {key: classify_switch(labs) for key, labs in labels.items()}


def topics_by_session(labels: TurnLabels) -> dict[str, int]:
    """Topic count per session; sessions with no labelled turn count as one topic."""
    per: dict[str, list[SwitchType]] = {}
    for (sid, n), st in sorted(switch_types(labels).items()):
        per.setdefault(sid, []).append(st)
    return {sid: topics_per_conversation(s) for sid, s in per.items()}


@dataclass
class AgreementRow:
    count: int  # turns of this type under judgment a
    reference: int  # turns of this type under judgment b
    shared: int  # turns of this type under both

    @property
    def percentage(self) -> float:
        return 100.0 * self.shared / self.reference if self.reference else 0.0


@dataclass
class Agreement:
    by_type: dict[SwitchType, AgreementRow]
    candidates: int
    candidate_agreement: float  # share of candidates with identical labels
    positive_overlap: float  # |pos(a) & pos(b)| / |pos(b)|

    def to_dict(self) -> dict:
        return {
            "by_type": {
                t.value: {"count": r.count, "reference": r.reference, "shared": r.shared, "percentage": r.percentage}
                for t, r in self.by_type.items()
            },
            "candidates": self.candidates,
            "candidate_agreement": self.candidate_agreement,
            "positive_overlap": self.positive_overlap,
        }


def judgment_agreement(a: TurnLabels, b: TurnLabels) -> Agreement:
    """Compare judgment ``a`` against reference judgment ``b``.

    Per switch type the percentage is ``shared / reference``: of the turns
    that ``b`` puts in a type, the share that ``a`` puts there too.
    """
    if set(a) != set(b):
        raise ValueError("judgments cover different (session, turn) sets")
    for key in a:
        if len(a[key]) != len(b[key]):
            raise ValueError(f"judgments disagree on the candidate count of {key}")
    sa, sb = switch_types(a), switch_types(b)
    by_type = {}
    for t in SwitchType:
        ka = {k for k, v in sa.items() if v == t}
        kb = {k for k, v in sb.items() if v == t}
        by_type[t] = AgreementRow(len(ka), len(kb), len(ka & kb))
    flat_a = np.array([x for k in sorted(a) for x in a[k]], dtype=bool)
    flat_b = np.array([x for k in sorted(b) for x in b[k]], dtype=bool)
    n = len(flat_a)
    same = float(np.mean(flat_a == flat_b)) if n else 1.0
    pos_b = int(flat_b.sum())
    overlap = float((flat_a & flat_b).sum() / pos_b) if pos_b else 0.0
    return Agreement(by_type, n, same, overlap)


@dataclass
class SuccessFailure:
    outcome: dict[str, str]  # query key -> success / failure / tie
    histogram: dict[SwitchType, Counter] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def totals(self) -> Counter:
        return Counter(self.outcome.values())

    def to_dict(self) -> dict:
        return {
            "totals": {k: self.totals().get(k, 0) for k in ("success", "failure", "tie")},
            "histogram": {
                t.value: {k: c.get(k, 0) for k in ("success", "failure", "tie")} for t, c in self.histogram.items()
            },
            "missing": list(self.missing),
        }


def compare_mrr(selected: float, expanded: float) -> str:
    if selected > expanded:
        return "success"
    if selected < expanded:
        return "failure"
    return "tie"


def success_failure(
    run_prl: Mapping[str, RankedList],
    run_all: Mapping[str, RankedList],
    qrels: Qrels,
    switches: Mapping[str, SwitchType] | None = None,
) -> SuccessFailure:
    """Per-turn outcome of selective vs. all-history expansion.

    ``switches`` maps query keys to switch types for the histogram. Keys
    found in only one run are skipped and listed in ``missing``.
    """
    keys = sorted(set(run_prl) | set(run_all))
    res = SuccessFailure({}, {t: Counter() for t in SwitchType})
    for key in keys:
        if key not in run_prl or key not in run_all:
            res.missing.append(key)
            continue
        out = compare_mrr(mrr(run_prl[key], qrels), mrr(run_all[key], qrels))
        res.outcome[key] = out
        if switches is not None and key in switches:
            res.histogram[switches[key]][out] += 1
    return res


def analysis_report(
    labels: TurnLabels,
    reference: TurnLabels | None = None,
    sf: SuccessFailure | None = None,
) -> dict:
    counts = Counter(switch_types(labels).values())
    topics = topics_by_session(labels)
    report = {
        "switch_counts": {t.value: counts.get(t, 0) for t in SwitchType},
        "topics_per_conv": {"mean": float(np.mean(list(topics.values()))) if topics else 0.0, "sessions": len(topics)},
    }
    if reference is not None:
        report["agreement"] = judgment_agreement(labels, reference).to_dict()
    if sf is not None:
        report["success_failure"] = sf.to_dict()
    return report


def write_report(report: dict, json_path: str | Path, tsv_path: str | Path | None = None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    if tsv_path is None:
        return
    rows = ["section\tkey\tvalue"]
    for t, c in report["switch_counts"].items():
        rows.append(f"switch_counts\t{t}\t{c}")
    rows.append(f"topics_per_conv\tmean\t{report['topics_per_conv']['mean']:.4f}")
    for t, r in report.get("agreement", {}).get("by_type", {}).items():
        rows.append(f"agreement\t{t}\t{r['count']} ({r['shared']}, {r['percentage']:.2f}%)")
    for t, h in report.get("success_failure", {}).get("histogram", {}).items():
        for k, v in h.items():
            rows.append(f"success_failure\t{t}.{k}\t{v}")
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
