"""Raw, all-history and oracle-selected expansion on synthetic sessions.

Run: python notebooks/01_expansion_forms.py
"""
import time

import numpy as np

from convexp.config import RunConfig
from convexp.pipeline import fig2_table, format_table
from convexp.prl import generate_prl
from convexp.sparse import BM25Retriever, build_index
from convexp.synth import SynthSpec, generate

t0 = time.perf_counter()
data = generate(SynthSpec())
print(len(data.collection), "docs,", len(data.sessions), "sessions,", data.redraws, "redraws")

# one session, turn by turn
s = data.sessions[0]
for t in s.turns:
    print(t.turn_index, data.turn_topics[s.session_id][t.turn_index - 1], t.text)

# how often is an earlier turn useful?
bm25 = BM25Retriever(build_index(data.collection))
labels = [lab for s in data.sessions for lab in generate_prl(s, bm25, data.qrels)]
same = np.array([data.same_topic(l.session_id, l.turn, l.candidate) for l in labels])
pos = np.array([l.label for l in labels])
print("positive rate, same topic:  %.3f" % pos[same].mean())
print("positive rate, other topic: %.3f" % pos[~same].mean())

rows = fig2_table(data.collection, data.sessions, data.qrels, RunConfig())
print(format_table(rows))
print("%.1fs" % (time.perf_counter() - t0))
