"""Joint selector-retriever training and a sweep over alpha.

Run: python notebooks/03_joint_training.py
"""
from convexp.dense import DenseRetriever, PassageIndex, init_encoder
from convexp.joint import JointConfig, build_joint_examples, train_joint
from convexp.metrics import MetricSpec, evaluate_run
from convexp.pipeline import run_form, split_sessions
from convexp.prl import generate_prl, labels_by_turn
from convexp.sparse import BM25Retriever, build_index
from convexp.synth import SynthSpec, generate

spec = SynthSpec(num_sessions=60, num_docs=600, vocab_size=1500)
data = generate(spec)
train, test = split_sessions(data.sessions)

bm25 = BM25Retriever(build_index(data.collection))
labels = labels_by_turn([lab for s in train for lab in generate_prl(s, bm25, data.qrels)])
enc = init_encoder(data.collection)
passages = PassageIndex(enc, data.collection)
examples = build_joint_examples(train, labels, data.qrels, data.collection)


def heldout_mrr(encoder):
    run = run_form(test, DenseRetriever(encoder, passages), "all", 100)
    return evaluate_run(run, data.qrels, [MetricSpec.parse("mrr")]).means["mrr"]


print("untrained  MRR %.4f" % heldout_mrr(enc))
for alpha in (0.0, 0.5, 1.0, 2.0):
    hist = []
    trained, head = train_joint(examples, enc, passages, JointConfig(alpha=alpha, epochs=20), history=hist)
    print("alpha %.1f  MRR %.4f  L_R %.3f -> %.3f  L_S %.3f -> %.3f" % (
        alpha, heldout_mrr(trained), hist[0]["L_R"], hist[-1]["L_R"], hist[0]["L_S"], hist[-1]["L_S"]))
