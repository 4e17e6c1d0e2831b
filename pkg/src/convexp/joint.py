"""Joint selector-retriever fine-tuning.

The retriever reads the fully expanded query ``q^all`` and is trained with
the contrastive ranking loss. A small selector head classifies each
historical turn from its query-side encoding, trained on the static PRL
targets with class weights. Both losses share ``W_q``::

    total = alpha * L_selector + L_ranking
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Collection, ConversationSession, DataError, Qrels, tokenize
from .dense import (
    DenseEncoder,
    DenseRetriever,
    PassageIndex,
    TrainingBatch,
    contrastive_terms,
    encode,
    epoch_order,
    sample_negatives,
)
from .prl import ExpansionForm, compose_query, generate_prl, labels_by_turn
from .selector import NEG, POS, SingleClassError, class_weights, softmax_ce

log = logging.getLogger(__name__)

HEAD_VERSION = 1


@dataclass
class SelectorHead:
    V: np.ndarray  # (2, d)
    c: np.ndarray  # (2,)

    @classmethod
    def init(cls, dim: int, seed: int = 0, std: float = 0.01) -> "SelectorHead":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(2, dim)), np.zeros(2))

    def copy(self) -> "SelectorHead":
        return SelectorHead(self.V.copy(), self.c.copy())

    def positive_proba(self, reprs: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(reprs) @ self.V.T + self.c
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p[:, POS] / p.sum(axis=1)


@dataclass(frozen=True)
class JointConfig:
    alpha: float = 1.0
    lr: float = 0.05
    epochs: int = 10
    seed: int = 0
    num_negatives: int = 8
    refresh_prl_every: int = 0
    k: int = 100

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.num_negatives < 1 or self.refresh_prl_every < 0:
            raise ValueError("epochs, num_negatives and refresh_prl_every out of range")


@dataclass
class JointExample:
    session: ConversationSession
    n: int
    batch: TrainingBatch  # query = q^all of turn n
    labels: tuple[bool, ...]  # PRL of turn n, one per historical turn


@dataclass
class JointLoss:
    loss: float
    ranking: float
    selector: float
    grad_W_q: np.ndarray
    grad_V: np.ndarray
    grad_c: np.ndarray


def turn_segment_repr(encoder: DenseEncoder, session: ConversationSession, n: int, i: int) -> np.ndarray:
    """Query-side encoding of historical turn ``h_i`` as seen from turn ``n``."""
    if not 1 <= i < n <= len(session):
        raise IndexError(f"need 1 <= i < n <= {len(session)}, got i={i}, n={n}")
    return encode(encoder, tokenize(session.turn(i).text), "query")


def _terms(
    encoder: DenseEncoder,
    head: SelectorHead,
    session: ConversationSession,
    n: int,
    batch: TrainingBatch,
    labels: Sequence[bool],
    alpha: float,
    passages: PassageIndex,
    weights: np.ndarray,
):
    """Loss pieces plus the W_q gradient restricted to the touched columns."""
    if len(labels) != n - 1:
        raise ValueError(f"turn {n} needs {n - 1} labels, got {len(labels)}")
    d = encoder.dim
    cols_r, vals_r = encoder.sparse_tf(tokenize(batch.query))
    qvec = encoder.W_q[:, cols_r] @ vals_r
    pvecs = passages.vectors((batch.positive,) + tuple(batch.negatives))
    l_r, g_r = contrastive_terms(qvec, pvecs)

    segs = [encoder.sparse_tf(tokenize(session.turn(i).text)) for i in range(1, n)]
    cols = np.unique(np.concatenate([cols_r] + [c for c, _ in segs])) if segs else cols_r
    where = {int(c): j for j, c in enumerate(cols)}
    grad = np.zeros((d, len(cols)))
    np.add.at(grad, (slice(None), [where[int(c)] for c in cols_r]), np.outer(g_r, vals_r))

    l_s = 0.0
    dV = np.zeros_like(head.V)
    dc = np.zeros_like(head.c)
    if segs:
        reprs = np.stack([encoder.W_q[:, c] @ v for c, v in segs])
        y = np.array([POS if lab else NEG for lab in labels], dtype=np.int64)
        losses, dz = softmax_ce(reprs @ head.V.T + head.c, y, weights)
        m = len(y)
        l_s = float(losses.mean())
        dz /= m
        dV = alpha * (dz.T @ reprs)
        dc = alpha * dz.sum(axis=0)
        d_reprs = alpha * (dz @ head.V)
        for (c, v), dr in zip(segs, d_reprs):
            np.add.at(grad, (slice(None), [where[int(x)] for x in c]), np.outer(dr, v))
    return alpha * l_s + l_r, l_r, l_s, cols, grad, dV, dc


def joint_loss(
    encoder: DenseEncoder,
    head: SelectorHead,
    session: ConversationSession,
    n: int,
    positive: str,
    negatives: Sequence[str],
    labels: Sequence[bool],
    alpha: float,
    passages: PassageIndex,
    weights: tuple[float, float] = (1.0, 1.0),
) -> JointLoss:
    """``alpha * L_selector + L_ranking`` for turn ``n`` with dense gradients.

    ``weights`` is ``(w_pos, w_neg)`` as returned by :func:`class_weights`.
    For ``n == 1`` the selector term is zero.
    """
    passages.check(encoder)
    batch = TrainingBatch(compose_query(session, n, ExpansionForm.all()), positive, tuple(negatives))
    w = np.array([weights[1], weights[0]])
    total, l_r, l_s, cols, g, dV, dc = _terms(encoder, head, session, n, batch, labels, alpha, passages, w)
    grad = np.zeros_like(encoder.W_q)
    grad[:, cols] = g
    return JointLoss(total, l_r, l_s, grad, dV, dc)


def build_joint_examples(
    sessions: Sequence[ConversationSession],
    labels: Mapping[tuple[str, int], Sequence[bool]],
    qrels: Qrels,
    collection: Collection,
    num_negatives: int = 8,
    seed: int = 0,
) -> list[JointExample]:
    """One example per judged turn, in (session_id, turn) order.

    Turns ``n >= 2`` without PRL labels are skipped.
    """
    rng = np.random.default_rng(seed)
    out = []
    for session in sorted(sessions, key=lambda s: s.session_id):
        for n in range(1, len(session) + 1):
            turn = session.turn(n)
            rel = qrels.relevant(turn.key)
            if not rel:
                continue
            labs = tuple(labels.get((session.session_id, n), ())) if n > 1 else ()
            if len(labs) != n - 1:
                log.debug("no PRL labels for %s, skipping", turn.key)
                continue
            positive = sorted(rel, key=lambda d: (-rel[d], d))[0]
            negs = sample_negatives(collection, set(rel), num_negatives, rng)
            batch = TrainingBatch(compose_query(session, n, ExpansionForm.all()), positive, negs)
            out.append(JointExample(session, n, batch, labs))
    return out


def _weights_for(examples: Sequence[JointExample]) -> np.ndarray:
    flat = [lab for ex in examples for lab in ex.labels]
    try:
        w_pos, w_neg = class_weights(flat)
    except SingleClassError:
        log.warning("selector labels are single-class; using unit class weights")
        w_pos, w_neg = 1.0, 1.0
    return np.array([w_neg, w_pos])


def train_joint(
    examples: Sequence[JointExample],
    encoder: DenseEncoder,
    passages: PassageIndex,
    config: JointConfig = JointConfig(),
    head: SelectorHead | None = None,
    qrels: Qrels | None = None,
    history: list | None = None,
) -> tuple[DenseEncoder, SelectorHead]:
    """Gradient descent on ``W_q``, ``V`` and ``c``; ``W_p`` is never written.

    Example order per epoch comes from the same seeded permutation stream as
    :func:`convexp.dense.train_retriever`, so ``alpha = 0`` reproduces
    retriever-only training exactly. With ``config.refresh_prl_every = r > 0``
    the PRL targets are regenerated with the current dense retriever every
    ``r`` epochs (needs ``qrels``).
    """
    if not examples:
        raise ValueError("empty training set")
    if config.refresh_prl_every and qrels is None:
        raise ValueError("refresh_prl_every needs qrels")
    passages.check(encoder)
    enc = encoder.copy()
    enc.W_p = encoder.W_p
    head = SelectorHead.init(enc.dim, config.seed) if head is None else head.copy()
    weights = _weights_for(examples)
    examples = list(examples)
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for idx in epoch_order(rng, len(examples)):
            ex = examples[idx]
            total, l_r, l_s, cols, g, dV, dc = _terms(
                enc, head, ex.session, ex.n, ex.batch, ex.labels, config.alpha, passages, weights
            )
            enc.W_q[:, cols] -= config.lr * g
            head.V -= config.lr * dV
            head.c -= config.lr * dc
            sums += (l_r, l_s, total)
        mean = sums / len(examples)
        rec = {"epoch": epoch, "L_R": mean[0], "L_S": mean[1], "total": mean[2]}
        log.debug("joint epoch %d %s", epoch, rec)
        if history is not None:
            history.append(rec)
        if config.refresh_prl_every and (epoch + 1) % config.refresh_prl_every == 0:
            examples = _refresh(examples, enc, passages, qrels, config.k)
    return enc, head


def _refresh(examples, encoder, passages, qrels, k) -> list[JointExample]:
    retriever = DenseRetriever(encoder, passages)
    fresh: dict[tuple[str, int], tuple[bool, ...]] = {}
    for session in {ex.session.session_id: ex.session for ex in examples}.values():
        fresh.update(labels_by_turn(generate_prl(session, retriever, qrels, k)))
    return [
        JointExample(ex.session, ex.n, ex.batch, fresh.get((ex.session.session_id, ex.n), ex.labels))
        for ex in examples
    ]


def mean_joint_loss(
    examples: Sequence[JointExample],
    encoder: DenseEncoder,
    head: SelectorHead,
    passages: PassageIndex,
    alpha: float,
) -> float:
    weights = _weights_for(examples)
    vals = [_terms(encoder, head, ex.session, ex.n, ex.batch, ex.labels, alpha, passages, weights)[0] for ex in examples]
    return float(np.mean(vals))


def save_head(head: SelectorHead, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"version": HEAD_VERSION, "V": head.V.tolist(), "c": head.c.tolist()}, fh)


def load_head(path: str | Path) -> SelectorHead:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != HEAD_VERSION:
        raise DataError(f"{path}: head version {doc.get('version')} != {HEAD_VERSION}")
    return SelectorHead(np.asarray(doc["V"], dtype=float), np.asarray(doc["c"], dtype=float))
