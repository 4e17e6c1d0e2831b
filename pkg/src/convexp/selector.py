"""Historical-turn selector: a class-weighted two-class linear softmax.

Each (current turn, historical turn) pair is described by five features
and classified as useful (positive) or not. Class weights follow
``w[y] = |negative| / |y|`` so the rare positive class is up-weighted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ConversationSession, DataError, tokenize
from .dense import DenseEncoder, encode
from .prl import ExpansionForm, PRLabel, compose_query
from .sparse import InvertedIndex

log = logging.getLogger(__name__)

FEATURES = ("jaccard", "dense_cos", "recency", "len_ratio", "idf_overlap")
FEATURE_VERSION = 1
NEG, POS = 0, 1


class SingleClassError(ValueError):
    """Raised when class weights cannot be computed; train unweighted instead."""


class FeatureExtractor:
    """Pairwise features of ``(q_n, h_i)``; idf comes from a BM25 index."""

    def __init__(self, index: InvertedIndex, encoder: DenseEncoder):
        self.index = index
        self.encoder = encoder

    def pair(self, current: str, candidate: str, i: int, n: int) -> np.ndarray:
        q, h = tokenize(current), tokenize(candidate)
        qs, hs = set(q), set(h)
        union = qs | hs
        shared = qs & hs
        jaccard = len(shared) / len(union) if union else 0.0
        qv, hv = encode(self.encoder, q), encode(self.encoder, h)
        denom = np.linalg.norm(qv) * np.linalg.norm(hv)
        cos = float(qv @ hv / denom) if denom > 0 else 0.0
        recency = i / (n - 1) if n > 1 else 1.0
        len_ratio = min(4.0, len(h) / max(1, len(q)))
        idf_overlap = sum(self.index.idf(t) for t in shared)
        return np.array([jaccard, cos, recency, len_ratio, idf_overlap])

    def turn(self, session: ConversationSession, n: int) -> np.ndarray:
        """Feature matrix for all candidates of turn ``n`` (shape ``(n-1, F)``)."""
        current = session.turn(n).text
        rows = [self.pair(current, session.turn(i).text, i, n) for i in range(1, n)]
        return np.array(rows).reshape(n - 1, len(FEATURES))


@dataclass
class SelectorModel:
    U: np.ndarray  # (2, F)
    b: np.ndarray  # (2,)
    w_pos: float = 1.0
    w_neg: float = 1.0
    # affine feature standardisation applied before U
    mean: np.ndarray = field(default_factory=lambda: np.zeros(len(FEATURES)))
    scale: np.ndarray = field(default_factory=lambda: np.ones(len(FEATURES)))

    @classmethod
    def init(cls, num_features: int = len(FEATURES), seed: int = 0, std: float = 0.01) -> "SelectorModel":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, std, size=(2, num_features)),
            np.zeros(2),
            mean=np.zeros(num_features),
            scale=np.ones(num_features),
        )

    def copy(self) -> "SelectorModel":
        return SelectorModel(
            self.U.copy(), self.b.copy(), self.w_pos, self.w_neg, self.mean.copy(), self.scale.copy()
        )

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_neg, self.w_pos])

    def normalise(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) - self.mean) / self.scale

    def positive_proba(self, X: np.ndarray) -> np.ndarray:
        z = self.normalise(X) @ self.U.T + self.b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p[:, POS] / p.sum(axis=1)

    def predict(self, X: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return self.positive_proba(X) >= threshold


def class_weights(labels: Sequence[bool]) -> tuple[float, float]:
    """``(w_pos, w_neg)`` with ``w_neg = 1`` and ``w_pos = #neg / #pos``."""
    pos = sum(1 for x in labels if x)
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise SingleClassError(
            f"need both classes for weight assignment (pos={pos}, neg={neg}); train unweighted instead"
        )
    return neg / pos, 1.0


def softmax_ce(logits: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted CE ``-w[y] log softmax(z)[y]`` and ``d loss / d z``."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    rows = np.arange(len(y))
    sw = w[y]
    loss = sw * (lse - logits[rows, y])
    dz = np.exp(logits - lse[:, None])
    dz[rows, y] -= 1.0
    return loss, dz * sw[:, None]


def weighted_ce_loss(
    model: SelectorModel, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean class-weighted cross-entropy and its gradients w.r.t. ``U`` and ``b``.

    ``X`` holds raw feature rows; they are standardised with the model's
    ``mean``/``scale`` first, so gradients are taken in standardised space.
    """
    Xn = model.normalise(X)
    y = np.asarray(y, dtype=np.int64)
    loss, dz = softmax_ce(Xn @ model.U.T + model.b, y, model.weights)
    m = len(y)
    return float(loss.mean()), dz.T @ Xn / m, dz.sum(axis=0) / m


def fit_selector(
    X: np.ndarray,
    y: np.ndarray,
    lr: float = 0.5,
    epochs: int = 200,
    seed: int = 0,
    weighted: bool = True,
    history: list | None = None,
) -> SelectorModel:
    """Full-batch gradient descent on the weighted CE loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training set")
    model = SelectorModel.init(X.shape[1], seed)
    if weighted:
        model.w_pos, model.w_neg = class_weights(y.astype(bool).tolist())
    model.mean = X.mean(axis=0)
    sd = X.std(axis=0)
    model.scale = np.where(sd > 0, sd, 1.0)
    for epoch in range(epochs):
        loss, dU, db = weighted_ce_loss(model, X, y)
        model.U -= lr * dU
        model.b -= lr * db
        if history is not None:
            history.append({"epoch": epoch, "loss": loss})
    return model


def prl_features(
    labels: Sequence[PRLabel],
    sessions: Sequence[ConversationSession],
    extractor: FeatureExtractor,
) -> tuple[np.ndarray, np.ndarray]:
    by_id = {s.session_id: s for s in sessions}
    rows, ys = [], []
    for lab in sorted(labels, key=lambda x: x.key):
        s = by_id[lab.session_id]
        rows.append(extractor.pair(s.turn(lab.turn).text, s.turn(lab.candidate).text, lab.candidate, lab.turn))
        ys.append(POS if lab.label else NEG)
    return np.array(rows).reshape(len(rows), len(FEATURES)), np.array(ys, dtype=np.int64)


def train_selector(
    labels: Sequence[PRLabel],
    sessions: Sequence[ConversationSession],
    extractor: FeatureExtractor,
    lr: float = 0.5,
    epochs: int = 200,
    seed: int = 0,
    weighted: bool = True,
    history: list | None = None,
) -> SelectorModel:
    """Train on PRL data; raises :class:`SingleClassError` for single-class data when weighted."""
    X, y = prl_features(labels, sessions, extractor)
    return fit_selector(X, y, lr=lr, epochs=epochs, seed=seed, weighted=weighted, history=history)


def predict_and_expand(
    model: SelectorModel,
    extractor: FeatureExtractor,
    session: ConversationSession,
    n: int,
    threshold: float = 0.5,
) -> tuple[list[bool], str]:
    """Select history turns for ``q_n``; falls back to the raw query if none is chosen."""
    if n == 1:
        return [], session.turn(1).text
    selections = model.predict(extractor.turn(session, n), threshold).tolist()
    if not any(selections):
        return selections, session.turn(n).text
    return selections, compose_query(session, n, ExpansionForm.prl(selections))


def classification_report(predictions: Sequence[bool], gold: Sequence[bool]) -> dict[str, float]:
    """Positive-class P/R/F1 plus negative-class F1, macro F1 and accuracy."""
    if len(predictions) != len(gold):
        raise ValueError("predictions and gold differ in length")
    if not gold:
        raise ValueError("empty input")
    p = np.asarray(predictions, dtype=bool)
    g = np.asarray(gold, dtype=bool)

    def prf(pred, true):
        tp = int(np.sum(pred & true))
        fp = int(np.sum(pred & ~true))
        fn = int(np.sum(~pred & true))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return prec, rec, f1

    pp, pr, pf = prf(p, g)
    np_, nr, nf = prf(~p, ~g)
    return {
        "precision": pp,
        "recall": pr,
        "f1": pf,
        "neg_precision": np_,
        "neg_recall": nr,
        "neg_f1": nf,
        "macro_f1": (pf + nf) / 2,
        "accuracy": float(np.mean(p == g)),
        "support_pos": int(g.sum()),
        "support_neg": int((~g).sum()),
    }


def save_selector(model: SelectorModel, path: str | Path) -> None:
    doc = {
        "feature_version": FEATURE_VERSION,
        "features": list(FEATURES),
        "U": model.U.tolist(),
        "b": model.b.tolist(),
        "w_pos": model.w_pos,
        "w_neg": model.w_neg,
        "feature_mean": model.mean.tolist(),
        "feature_scale": model.scale.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_selector(path: str | Path) -> SelectorModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("feature_version") != FEATURE_VERSION:
        raise DataError(f"{path}: feature_version {doc.get('feature_version')} != {FEATURE_VERSION}")
    return SelectorModel(
        np.asarray(doc["U"], dtype=float),
        np.asarray(doc["b"], dtype=float),
        float(doc["w_pos"]),
        float(doc["w_neg"]),
        np.asarray(doc["feature_mean"], dtype=float),
        np.asarray(doc["feature_scale"], dtype=float),
    )
