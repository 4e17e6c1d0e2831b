"""Pipeline stages over a fixed working-directory layout.

::

    workdir/
      index/    bm25.json, dense.json, dense_log.jsonl
      prl/      prl.jsonl, meta.json
      models/   selector.json, joint_encoder.json, joint_head.json, joint_log.jsonl
      runs/     <retriever>.<form>.run
      reports/  evaluation, analysis and fig2 reports

Every stage reads its inputs from the config and the workdir and writes
deterministic files, so re-running a stage reproduces its outputs byte for
byte.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import SwitchType, analysis_report, classify_switch, success_failure, write_report
from .config import RunConfig, save_config
from .data import (
    Collection,
    ConversationSession,
    DataError,
    Qrels,
    RankedList,
    load_corpus,
    load_qrels,
    load_run,
    load_sessions,
    write_run,
)
from .dense import (
    DenseEncoder,
    DenseRetriever,
    PassageIndex,
    init_encoder,
    load_encoder,
    make_batches,
    save_encoder,
    train_retriever,
)
from .joint import JointConfig, build_joint_examples, save_head, train_joint
from .metrics import DEFAULT_METRICS, MetricSpec, evaluate_run
from .prl import ExpansionForm, PRLabel, Retriever, compose_query, generate_prl, labels_by_turn, read_prl, write_prl
from .selector import (
    FeatureExtractor,
    SelectorModel,
    classification_report,
    load_selector,
    predict_and_expand,
    prl_features,
    save_selector,
    train_selector,
)
from .sparse import BM25Retriever, InvertedIndex, build_index, load_index, save_index
from .synth import SynthSpec, generate, spec_dict

log = logging.getLogger(__name__)

FORMS = ("raw", "all", "prl", "selector")
SPLITS = ("train", "test", "all")
FIG2_METRICS = tuple(MetricSpec.parse(m) for m in ("mrr", "ndcg@3", "recall@10", "recall@100"))


class MissingPrerequisite(DataError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `convexp {producer}` first")
        self.path = path
        self.producer = producer


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _p(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    bm25 = property(lambda self: self._p("index", "bm25.json"))
    dense = property(lambda self: self._p("index", "dense.json"))
    dense_log = property(lambda self: self._p("index", "dense_log.jsonl"))
    prl = property(lambda self: self._p("prl", "prl.jsonl"))
    prl_meta = property(lambda self: self._p("prl", "meta.json"))
    selector = property(lambda self: self._p("models", "selector.json"))
    joint_encoder = property(lambda self: self._p("models", "joint_encoder.json"))
    joint_head = property(lambda self: self._p("models", "joint_head.json"))
    joint_log = property(lambda self: self._p("models", "joint_log.jsonl"))

    def run(self, retriever: str, form: str) -> Path:
        return self._p("runs", f"{retriever}.{form}.run")

    def report(self, name: str) -> Path:
        return self._p("reports", name)

    def ensure(self) -> None:
        for sub in ("index", "prl", "models", "runs", "reports"):
            self._p(sub).mkdir(parents=True, exist_ok=True)

    @staticmethod
    def need(path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingPrerequisite(path, producer)
        return path


@dataclass
class Inputs:
    collection: Collection
    sessions: list[ConversationSession]
    qrels: Qrels


def load_inputs(config: RunConfig) -> Inputs:
    for p in (config.paths_corpus, config.paths_sessions, config.paths_qrels):
        if not Path(p).exists():
            raise MissingPrerequisite(Path(p), "synth")
    return Inputs(
        load_corpus(config.paths_corpus),
        load_sessions(config.paths_sessions),
        load_qrels(config.paths_qrels),
    )


def split_sessions(
    sessions: Sequence[ConversationSession], test_fraction: float = 0.2
) -> tuple[list[ConversationSession], list[ConversationSession]]:
    """Deterministic split by session id: the last ``ceil(f * N)`` sessions are held out."""
    ordered = sorted(sessions, key=lambda s: s.session_id)
    if len(ordered) < 2:
        return ordered, ordered
    n_test = min(len(ordered) - 1, max(1, math.ceil(test_fraction * len(ordered))))
    return ordered[:-n_test], ordered[-n_test:]


def pick_split(sessions, name: str, test_fraction: float) -> list[ConversationSession]:
    if name not in SPLITS:
        raise DataError(f"split must be one of {SPLITS}")
    if name == "all":
        return sorted(sessions, key=lambda s: s.session_id)
    train, test = split_sessions(sessions, test_fraction)
    return train if name == "train" else test


def _first_relevant(qrels: Qrels, qkey: str) -> str | None:
    rel = qrels.relevant(qkey)
    return sorted(rel, key=lambda d: (-rel[d], d))[0] if rel else None


def train_base_dense(
    collection: Collection,
    sessions: Sequence[ConversationSession],
    qrels: Qrels,
    config: RunConfig,
    history: list | None = None,
) -> tuple[DenseEncoder, PassageIndex]:
    """Initialise the dense encoder and fit ``W_q`` on raw queries of ``sessions``."""
    enc = init_encoder(collection, config.dense_dim, config.dense_vocab_cap, config.seed, config.dense_scale)
    passages = PassageIndex(enc, collection)
    pairs, excl = [], []
    for s in sessions:
        for t in s.turns:
            pos = _first_relevant(qrels, t.key)
            if pos is not None:
                pairs.append((t.text, pos))
                excl.append(set(qrels.relevant(t.key)))
    if pairs and config.dense_epochs:
        batches = make_batches(pairs, collection, excl, config.dense_negatives, config.seed)
        enc = train_retriever(enc, batches, passages, config.dense_lr, config.dense_epochs, config.seed, history)
    return enc, passages


def compose_for(
    session: ConversationSession,
    n: int,
    form: str,
    labels: dict | None = None,
    selector: tuple[SelectorModel, FeatureExtractor] | None = None,
    threshold: float = 0.5,
) -> str:
    """Query text of turn ``n`` under ``form``.

    The ``prl`` form falls back to the raw query for turns without labels.
    """
    if form in ("raw", "all"):
        return compose_query(session, n, ExpansionForm(form))
    if n == 1:
        return session.turn(1).text
    if form == "prl":
        labs = (labels or {}).get((session.session_id, n))
        return compose_query(session, n, ExpansionForm.prl(labs)) if labs else session.turn(n).text
    if form == "selector":
        model, extractor = selector
        return predict_and_expand(model, extractor, session, n, threshold)[1]
    raise DataError(f"unknown form {form!r}")


def run_form(
    sessions: Sequence[ConversationSession],
    retriever: Retriever,
    form: str,
    k: int = 100,
    **kwargs,
) -> list[RankedList]:
    out = []
    for s in sessions:
        for n in range(1, len(s) + 1):
            key = s.turn(n).key
            out.append(retriever.retrieve(compose_for(s, n, form, **kwargs), k, key))
    return out


def gold_labels(sessions, retriever: Retriever, qrels: Qrels, k: int, skipped=None) -> list[PRLabel]:
    return [lab for s in sessions for lab in generate_prl(s, retriever, qrels, k, skipped)]


def _write_jsonl(records, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_synth(spec: SynthSpec, outdir: str | Path) -> dict[str, Path]:
    data = generate(spec)
    paths = data.write(outdir)
    _write_json(spec_dict(spec), Path(outdir) / "spec.json")
    return paths


def cmd_index(config: RunConfig) -> None:
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    save_index(build_index(inp.collection, config.bm25_k1, config.bm25_b), wd.bm25)
    train, _ = split_sessions(inp.sessions, config.split_test_fraction)
    history: list = []
    enc, _ = train_base_dense(inp.collection, train, inp.qrels, config, history)
    save_encoder(enc, wd.dense)
    _write_jsonl(history, wd.dense_log)
    save_config(config, wd.root / "config.json")


def _load_bm25(wd: Workdir) -> InvertedIndex:
    return load_index(Workdir.need(wd.bm25, "index"))


def _load_dense(wd: Workdir, collection: Collection, kind: str = "dense") -> DenseRetriever:
    if kind == "joint":
        enc = load_encoder(Workdir.need(wd.joint_encoder, "joint-train"))
    else:
        enc = load_encoder(Workdir.need(wd.dense, "index"))
    return DenseRetriever(enc, collection)


def make_retriever(kind: str, wd: Workdir, collection: Collection) -> Retriever:
    if kind == "bm25":
        return BM25Retriever(_load_bm25(wd))
    if kind in ("dense", "joint"):
        return _load_dense(wd, collection, kind)
    raise DataError(f"unknown retriever {kind!r}")


def cmd_prl_generate(config: RunConfig) -> list[PRLabel]:
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    retriever = make_retriever(config.retriever, wd, inp.collection)
    skipped: list[str] = []
    labels = gold_labels(sorted(inp.sessions, key=lambda s: s.session_id), retriever, inp.qrels, config.k, skipped)
    write_prl(labels, wd.prl)
    _write_json({"retriever": config.retriever, "k": config.k, "labels": len(labels), "skipped": skipped}, wd.prl_meta)
    return labels


def _extractor(wd: Workdir) -> FeatureExtractor:
    return FeatureExtractor(_load_bm25(wd), load_encoder(Workdir.need(wd.dense, "index")))


def _split_labels(labels, sessions) -> list[PRLabel]:
    ids = {s.session_id for s in sessions}
    return [lab for lab in labels if lab.session_id in ids]


def cmd_selector_train(config: RunConfig) -> dict:
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    labels = read_prl(Workdir.need(wd.prl, "prl-generate"))
    extractor = _extractor(wd)
    train, test = split_sessions(inp.sessions, config.split_test_fraction)
    tr = _split_labels(labels, train)
    if not tr:
        raise DataError("no PRL labels in the training split")
    model = train_selector(
        tr, inp.sessions, extractor, config.selector_lr, config.selector_epochs, config.seed, config.selector_weighted
    )
    save_selector(model, wd.selector)
    report = {}
    for name, part in (("train", tr), ("test", _split_labels(labels, test))):
        if part:
            X, y = prl_features(part, inp.sessions, extractor)
            pred = model.predict(X, config.selector_threshold).tolist()
            report[name] = classification_report(pred, (y == 1).tolist())
    _write_json(report, wd.report("selector.json"))
    return report


def cmd_retrieve(config: RunConfig, form: str, split: str = "test", retriever: str | None = None) -> Path:
    if form not in FORMS:
        raise DataError(f"form must be one of {FORMS}")
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    kind = retriever or config.retriever
    r = make_retriever(kind, wd, inp.collection)
    kwargs: dict = {}
    if form == "prl":
        kwargs["labels"] = labels_by_turn(read_prl(Workdir.need(wd.prl, "prl-generate")))
    elif form == "selector":
        model = load_selector(Workdir.need(wd.selector, "selector-train"))
        kwargs["selector"] = (model, _extractor(wd))
        kwargs["threshold"] = config.selector_threshold
    sessions = pick_split(inp.sessions, split, config.split_test_fraction)
    run = run_form(sessions, r, form, config.k, **kwargs)
    path = wd.run(kind, form)
    write_run(run, path, tag=f"{kind}.{form}")
    return path


def cmd_joint_train(config: RunConfig) -> list[dict]:
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    labels = labels_by_turn(read_prl(Workdir.need(wd.prl, "prl-generate")))
    encoder = load_encoder(Workdir.need(wd.dense, "index"))
    train, _ = split_sessions(inp.sessions, config.split_test_fraction)
    jc = JointConfig(
        alpha=config.joint_alpha,
        lr=config.joint_lr,
        epochs=config.joint_epochs,
        seed=config.seed,
        num_negatives=config.dense_negatives,
        refresh_prl_every=config.joint_refresh_prl_every,
        k=config.k,
    )
    examples = build_joint_examples(train, labels, inp.qrels, inp.collection, jc.num_negatives, jc.seed)
    history: list = []
    enc, head = train_joint(examples, encoder, PassageIndex(encoder, inp.collection), jc, qrels=inp.qrels, history=history)
    save_encoder(enc, wd.joint_encoder)
    save_head(head, wd.joint_head)
    _write_jsonl(history, wd.joint_log)
    return history


def cmd_evaluate(config: RunConfig, run_path: str | Path, metrics: Sequence[str] | None = None) -> dict:
    wd = Workdir(config.workdir)
    wd.ensure()
    run_path = Path(run_path)
    if not run_path.exists():
        raise MissingPrerequisite(run_path, "retrieve")
    qrels = load_qrels(config.paths_qrels)
    specs = [MetricSpec.parse(m) for m in metrics] if metrics else DEFAULT_METRICS
    report = evaluate_run(load_run(run_path), qrels, specs)
    stem = run_path.name.removesuffix(".run")
    report.write(wd.report(f"{stem}.eval.json"), wd.report(f"{stem}.eval.tsv"))
    return report.means


def cmd_analyze(
    config: RunConfig,
    split: str = "test",
    selected_form: str = "selector",
    reference: str | Path | None = None,
) -> dict:
    """Switch counts, topics per session, agreement and success/failure.

    Gold PRL define the switch types. When a selector model exists its
    predicted labels are compared with the gold ones; ``reference`` is an
    optional further PRL file compared against gold.
    """
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    sessions = pick_split(inp.sessions, split, config.split_test_fraction)
    ids = {s.session_id for s in sessions}
    gold = {k: v for k, v in labels_by_turn(read_prl(Workdir.need(wd.prl, "prl-generate"))).items() if k[0] in ids}

    report = analysis_report(gold)
    if wd.selector.exists():
        model = load_selector(wd.selector)
        extractor = _extractor(wd)
        by_id = {s.session_id: s for s in sessions}
        pred = {
            (sid, n): tuple(model.predict(extractor.turn(by_id[sid], n), config.selector_threshold).tolist())
            for sid, n in gold
        }
        report["agreement_selector_vs_gold"] = analysis_report(pred, gold)["agreement"]
    if reference is not None:
        ref = {k: v for k, v in labels_by_turn(read_prl(reference)).items() if k[0] in ids}
        report["agreement_gold_vs_reference"] = analysis_report(gold, ref)["agreement"]

    kind = config.retriever
    sel_path = wd.run(kind, selected_form)
    all_path = wd.run(kind, "all")
    if sel_path.exists() and all_path.exists():
        switches = {f"{sid}_{n}": classify_switch(labs) for (sid, n), labs in gold.items()}
        sel = {r.query_key: r for r in load_run(sel_path)}
        full = {r.query_key: r for r in load_run(all_path)}
        keep = {s.turn(n).key for s in sessions for n in range(2, len(s) + 1)}
        sf = success_failure(
            {q: r for q, r in sel.items() if q in keep}, {q: r for q, r in full.items() if q in keep}, inp.qrels, switches
        )
        report["success_failure"] = sf.to_dict()
    write_report(report, wd.report("analysis.json"), wd.report("analysis.tsv"))
    return report


def fig2_table(
    collection: Collection,
    sessions: Sequence[ConversationSession],
    qrels: Qrels,
    config: RunConfig,
    retrievers: Sequence[str] = ("bm25", "dense"),
) -> list[dict]:
    """Mean metrics of the raw, all and gold-PRL forms per retriever.

    Gold PRL are generated separately with each retriever. The dense
    encoder is first fitted on raw queries of the training split.
    """
    rows = []
    ordered = sorted(sessions, key=lambda s: s.session_id)
    for kind in retrievers:
        if kind == "bm25":
            retriever: Retriever = BM25Retriever(build_index(collection, config.bm25_k1, config.bm25_b))
        elif kind == "dense":
            train, _ = split_sessions(ordered, config.split_test_fraction)
            enc, passages = train_base_dense(collection, train, qrels, config)
            retriever = DenseRetriever(enc, passages)
        else:
            raise DataError(f"fig2 supports bm25 and dense, not {kind!r}")
        labels = labels_by_turn(gold_labels(ordered, retriever, qrels, config.k))
        for form, name in (("raw", "raw"), ("all", "all"), ("prl", "gold_prl")):
            run = run_form(ordered, retriever, form, config.k, labels=labels)
            means = evaluate_run(run, qrels, FIG2_METRICS).means
            rows.append({"retriever": kind, "form": name, **means})
    return rows


def cmd_fig2(config: RunConfig) -> list[dict]:
    wd = Workdir(config.workdir)
    wd.ensure()
    inp = load_inputs(config)
    rows = fig2_table(inp.collection, inp.sessions, inp.qrels, config)
    _write_json(rows, wd.report("fig2.json"))
    cols = ["retriever", "form"] + [m.name for m in FIG2_METRICS]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join([r["retriever"], r["form"]] + [f"{r[c]:.4f}" for c in cols[2:]]))
    wd.report("fig2.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ["retriever", "form"] + [m.name for m in FIG2_METRICS]
    out = ["  ".join(f"{c:>10}" for c in cols)]
    for r in rows:
        out.append("  ".join([f"{r['retriever']:>10}", f"{r['form']:>10}"] + [f"{r[c]:>10.4f}" for c in cols[2:]]))
    return "\n".join(out)


__all__ = [
    "FORMS",
    "MissingPrerequisite",
    "SwitchType",
    "Workdir",
    "cmd_analyze",
    "cmd_evaluate",
    "cmd_fig2",
    "cmd_index",
    "cmd_joint_train",
    "cmd_prl_generate",
    "cmd_retrieve",
    "cmd_selector_train",
    "cmd_synth",
    "fig2_table",
    "split_sessions",
]
