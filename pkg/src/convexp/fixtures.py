"""Small bundled fixtures with hand-checkable answers."""

from __future__ import annotations

from .data import Collection, ConversationSession, Document, Qrels


def mini_session() -> tuple[Collection, ConversationSession, Qrels]:
    """Three documents and a two-turn session.

    Under BM25 the gold document D2 ranks second for the bare second query
    ("captain", shorter D1 wins) and first once the first turn is appended,
    so the single candidate is labelled positive with ``S_q = 0.5`` and
    ``S_h1 = 1.0``.
    """
    collection = Collection(
        [
            Document("D1", "captain kirk"),
            Document("D2", "captain picard of the enterprise"),
            Document("D3", "warp drive engineering"),
        ]
    )
    session = ConversationSession.from_texts("mini", ["picard enterprise", "captain"])
    qrels = Qrels()
    qrels.set("mini_1", "D2", 1)
    qrels.set("mini_2", "D2", 1)
    return collection, session, qrels
