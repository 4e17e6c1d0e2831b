"""Seeded synthetic conversational-search data.

World model
-----------
Every topic owns two entity words and an ordered chain of aspects drawn
from a shared aspect pool (each aspect is a pair of words). Document ``k``
of a topic contains the entity words, the first ``k`` aspects of the chain
and some filler words, so later documents accumulate the context of earlier
ones.

A session is split into contiguous topic blocks. Turn ``j`` of a block asks
about the next aspect of the chain and its gold document is the matching
chain document. Only the block's opening turn names the entity; follow-up
turns carry their aspect words alone, which many topics share. Expanding a
follow-up with an earlier turn of its own block therefore narrows retrieval
to the right topic, while turns from other blocks pull towards other topics.

Before noise is added each session skeleton is checked with the PRL
algorithm under BM25: every earlier same-topic turn must come out positive.
Sessions failing the check are redrawn.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Collection, ConversationSession, Document, Qrels, query_key, write_corpus, write_qrels, write_sessions
from .prl import generate_prl
from .sparse import BM25Retriever, build_index

log = logging.getLogger(__name__)


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_sessions: int = 200
    turns_per_session: int = 8
    num_topics_per_session: int = 3
    docs_per_topic: int = 10
    num_docs: int = 2000
    vocab_size: int = 3000
    noise_rate: float = 0.1
    seed: int = 7
    num_aspects: int = 60
    filler_per_doc: tuple[int, int] = (3, 8)
    max_redraws: int = 200

    def __post_init__(self):
        if self.num_topics_per_session > self.turns_per_session:
            raise InfeasibleSpec("num_topics_per_session must be <= turns_per_session")
        if self.num_topics_per_session < 1 or self.turns_per_session < 1 or self.num_sessions < 1:
            raise InfeasibleSpec("session shape parameters must be positive")
        if not 0 <= self.noise_rate < 1:
            raise InfeasibleSpec("noise_rate must be in [0, 1)")
        if self.docs_per_topic < 1 or self.num_docs < self.docs_per_topic:
            raise InfeasibleSpec("need at least one topic worth of documents")
        if self.num_docs % self.docs_per_topic:
            raise InfeasibleSpec("num_docs must be a multiple of docs_per_topic")
        if self.num_topics < self.num_topics_per_session:
            raise InfeasibleSpec("fewer topics than topics per session")
        if self.num_aspects < self.docs_per_topic:
            raise InfeasibleSpec("num_aspects must be >= docs_per_topic")
        if -(-self.turns_per_session // self.num_topics_per_session) > self.docs_per_topic:
            raise InfeasibleSpec("some topic block would need more turns than docs_per_topic")
        if self.num_filler < 50:
            raise InfeasibleSpec(
                f"vocab_size {self.vocab_size} too small: entity and aspect words need "
                f"{self.vocab_size - self.num_filler}, leaving {self.num_filler} filler words (< 50)"
            )

    @property
    def num_topics(self) -> int:
        return self.num_docs // self.docs_per_topic

    @property
    def num_filler(self) -> int:
        return self.vocab_size - 2 * self.num_topics - 2 * self.num_aspects


@dataclass
class SynthData:
    collection: Collection
    sessions: list[ConversationSession]
    qrels: Qrels
    # per session: topic id of every turn, in turn order
    turn_topics: dict[str, list[int]] = field(default_factory=dict)
    redraws: int = 0

    def same_topic(self, session_id: str, n: int, i: int) -> bool:
        topics = self.turn_topics[session_id]
        return topics[n - 1] == topics[i - 1]

    def write(self, outdir: str | Path) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": outdir / "corpus.jsonl",
            "sessions": outdir / "sessions.jsonl",
            "qrels": outdir / "qrels.txt",
        }
        write_corpus(self.collection, paths["corpus"])
        write_sessions(self.sessions, paths["sessions"])
        write_qrels(self.qrels, paths["qrels"])
        return paths


def _block_sizes(rng: np.random.Generator, turns: int, blocks: int, cap: int) -> list[int]:
    for _ in range(1000):
        cuts = np.sort(rng.choice(np.arange(1, turns), size=blocks - 1, replace=False)) if blocks > 1 else []
        sizes = np.diff(np.concatenate([[0], cuts, [turns]])).astype(int).tolist()
        if max(sizes) <= cap:
            return sizes
    raise InfeasibleSpec(f"cannot split {turns} turns into {blocks} blocks of at most {cap}")


class _World:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        words = [f"w{i:05d}" for i in rng.permutation(spec.vocab_size)]
        nt, na = spec.num_topics, spec.num_aspects
        self.entity = [words[2 * t : 2 * t + 2] for t in range(nt)]
        off = 2 * nt
        self.aspect = [words[off + 2 * a : off + 2 * a + 2] for a in range(na)]
        self.filler = words[off + 2 * na :]
        self.words = words
        self.chain = [rng.choice(na, size=spec.docs_per_topic, replace=False).tolist() for _ in range(nt)]
        width = len(str(spec.num_docs - 1))
        self.doc_id = [
            [f"D{(t * spec.docs_per_topic + k):0{width}d}" for k in range(spec.docs_per_topic)] for t in range(nt)
        ]
        docs = []
        lo, hi = spec.filler_per_doc
        for t in range(nt):
            for k in range(spec.docs_per_topic):
                toks = list(self.entity[t])
                for a in self.chain[t][: k + 1]:
                    toks.extend(self.aspect[a])
                toks.extend(rng.choice(self.filler, size=int(rng.integers(lo, hi + 1))).tolist())
                rng.shuffle(toks)
                docs.append(Document(self.doc_id[t][k], " ".join(toks)))
        self.collection = Collection(docs)

    def turn_text(self, topic: int, pos: int, opener: bool) -> list[str]:
        toks = list(self.aspect[self.chain[topic][pos]])
        if opener:
            toks = list(self.entity[topic]) + toks
        return toks


def generate(spec: SynthSpec = SynthSpec(), check: bool = True) -> SynthData:
    """Generate corpus, sessions and qrels for ``spec`` (deterministic per seed)."""
    root = np.random.SeedSequence(spec.seed)
    world_rng, session_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(3))
    world = _World(spec, world_rng)
    retriever = BM25Retriever(build_index(world.collection)) if check else None

    sessions, turn_topics = [], {}
    qrels = Qrels()
    width = len(str(spec.num_sessions - 1))
    redraws = 0
    for s in range(spec.num_sessions):
        sid = f"s{s:0{width}d}"
        for attempt in range(spec.max_redraws):
            texts, topics, gold = _draw_session(spec, world, session_rng)
            session = ConversationSession.from_texts(sid, [" ".join(t) for t in texts])
            local = Qrels()
            for n, doc_id in enumerate(gold, start=1):
                local.set(query_key(sid, n), doc_id, 1)
            if retriever is None or _planted_ok(session, topics, retriever, local):
                break
            redraws += 1
        else:
            raise InfeasibleSpec(f"session {sid}: no draw passed the PRL self-check in {spec.max_redraws} tries")
        noisy = [_add_noise(t, world.words, spec.noise_rate, noise_rng) for t in texts]
        sessions.append(ConversationSession.from_texts(sid, [" ".join(t) for t in noisy]))
        turn_topics[sid] = topics
        qrels.update(local)
    log.info("synth: %d sessions, %d redraws", len(sessions), redraws)
    return SynthData(world.collection, sessions, qrels, turn_topics, redraws)


def _draw_session(spec: SynthSpec, world: _World, rng: np.random.Generator):
    sizes = _block_sizes(rng, spec.turns_per_session, spec.num_topics_per_session, spec.docs_per_topic)
    topic_ids = rng.choice(spec.num_topics, size=len(sizes), replace=False).tolist()
    texts, topics, gold = [], [], []
    for topic, size in zip(topic_ids, sizes):
        start = int(rng.integers(0, spec.docs_per_topic - size + 1))
        for j in range(size):
            texts.append(world.turn_text(topic, start + j, opener=(j == 0)))
            topics.append(topic)
            gold.append(world.doc_id[topic][start + j])
    return texts, topics, gold


def _planted_ok(session, topics, retriever, qrels) -> bool:
    for lab in generate_prl(session, retriever, qrels):
        if topics[lab.turn - 1] == topics[lab.candidate - 1] and not lab.label:
            return False
    return True


def _add_noise(tokens: list[str], vocab: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    """After each token, with probability ``rate``, insert a word drawn from the whole vocabulary."""
    if rate == 0:
        return list(tokens)
    out = []
    for tok in tokens:
        out.append(tok)
        if rng.random() < rate:
            out.append(vocab[int(rng.integers(len(vocab)))])
    return out


def spec_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["filler_per_doc"] = list(spec.filler_per_doc)
    return d
