"""Train the turn selector on pseudo relevance labels and expand with it.

Run: python notebooks/02_selector.py
"""
import numpy as np

from convexp.dense import init_encoder
from convexp.metrics import MetricSpec, evaluate_run
from convexp.pipeline import run_form, split_sessions
from convexp.prl import generate_prl, labels_by_turn
from convexp.selector import FEATURES, FeatureExtractor, classification_report, prl_features, train_selector
from convexp.sparse import BM25Retriever, build_index
from convexp.synth import SynthSpec, generate

data = generate(SynthSpec())
train, test = split_sessions(data.sessions)
train_ids = {s.session_id for s in train}

bm25 = BM25Retriever(build_index(data.collection))
labels = [lab for s in data.sessions for lab in generate_prl(s, bm25, data.qrels)]
tr = [l for l in labels if l.session_id in train_ids]
te = [l for l in labels if l.session_id not in train_ids]
print(len(tr), "training labels,", sum(l.label for l in tr), "positive")

fx = FeatureExtractor(bm25.index, init_encoder(data.collection))
X, y = prl_features(te, data.sessions, fx)

models = {}
for weighted in (False, True):
    m = train_selector(tr, data.sessions, fx, weighted=weighted)
    models[weighted] = m
    rep = classification_report(m.predict(X).tolist(), (y == 1).tolist())
    print("weighted" if weighted else "unweighted", {k: round(v, 3) for k, v in rep.items()})

# positive-class weights per feature (standardised units)
print(dict(zip(FEATURES, np.round(models[True].U[1] - models[True].U[0], 2).tolist())))

gold = labels_by_turn(labels)
mrr = [MetricSpec.parse("mrr")]
for form in ("raw", "all", "selector", "prl"):
    run = run_form(test, bm25, form, 100, labels=gold, selector=(models[True], fx))
    print("%-9s MRR %.4f" % (form, evaluate_run(run, data.qrels, mrr).means["mrr"]))
