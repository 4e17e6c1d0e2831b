"""Pseudo-relevance-labelled history expansion for conversational search."""

from .analysis import SwitchType, classify_switch, judgment_agreement, success_failure, topics_per_conversation
from .data import (
    Collection,
    ConversationSession,
    DataError,
    Document,
    Qrels,
    QueryTurn,
    RankedList,
    load_corpus,
    load_qrels,
    load_run,
    load_sessions,
    query_key,
    tokenize,
)
from .dense import DenseEncoder, DenseRetriever, PassageIndex, encode, init_encoder, ranking_loss, train_retriever
from .joint import JointConfig, SelectorHead, joint_loss, train_joint
from .metrics import evaluate_run, mrr, ndcg_at_k, recall_at_k
from .prl import ExpansionForm, PRLabel, compose_query, generate_prl, generate_term_prl
from .selector import SelectorModel, class_weights, predict_and_expand, train_selector, weighted_ce_loss
from .sparse import BM25Retriever, build_index, bm25_retrieve
from .synth import SynthSpec, generate

__version__ = "0.1.0"
