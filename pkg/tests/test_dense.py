import numpy as np
import pytest
from helpers import fd_grad, random_collection, rel_error

from convexp.data import Collection, DataError, Document, tokenize
from convexp.dense import (
    DenseEncoder,
    DenseRetriever,
    PassageIndex,
    TrainingBatch,
    dense_retrieve,
    encode,
    init_encoder,
    load_encoder,
    make_batches,
    mean_ranking_loss,
    ranking_loss,
    save_encoder,
    train_retriever,
)

SMALL = Collection([Document("D1", "alpha beta"), Document("D2", "gamma delta"), Document("D3", "epsilon zeta")])


def identity_encoder(coll):
    terms = sorted({t for d in coll for t in tokenize(d.text)})
    vocab = {t: i for i, t in enumerate(terms)}
    W = np.eye(len(terms))
    return DenseEncoder(vocab, W.copy(), W)


def test_encode_edge_cases():
    enc = init_encoder(SMALL, dim=4)
    np.testing.assert_array_equal(encode(enc, []), np.zeros(4))
    np.testing.assert_array_equal(encode(enc, ["nope", "nada"]), np.zeros(4))
    one = encode(enc, ["alpha", "beta"])
    np.testing.assert_allclose(encode(enc, ["alpha", "alpha", "beta", "beta"]), one, atol=1e-15)
    col = enc.vocab["alpha"]
    np.testing.assert_allclose(encode(enc, ["alpha", "alpha", "beta"]), (2 * enc.W_q[:, col] + enc.W_q[:, enc.vocab["beta"]]) / 3)
    with pytest.raises(ValueError):
        encode(enc, ["alpha"], side="doc")


def test_oov_tokens_count_towards_length():
    enc = init_encoder(SMALL, dim=4)
    np.testing.assert_allclose(encode(enc, ["alpha", "oov"]), enc.W_q[:, enc.vocab["alpha"]] / 2)


def test_init_shapes_and_tie():
    enc = init_encoder(SMALL, dim=5, vocab_cap=3)
    assert enc.W_q.shape == (5, 3)
    np.testing.assert_array_equal(enc.W_q, enc.W_p)
    assert enc.W_q is not enc.W_p


def test_identity_encoder_ranks_overlapping_doc_first():
    enc = identity_encoder(SMALL)
    r = dense_retrieve(enc, SMALL, ["epsilon", "other"], 3)
    assert r.doc_ids[0] == "D3"
    assert len(dense_retrieve(enc, SMALL, ["epsilon"], 10)) == 3
    zero = dense_retrieve(enc, SMALL, ["unknown"], 3)
    assert zero.doc_ids == ["D1", "D2", "D3"] and all(s == 0 for _, s in zero.entries)


def test_passage_index_rejects_other_encoder():
    enc = init_encoder(SMALL, dim=4)
    P = PassageIndex(enc, SMALL)
    other = init_encoder(SMALL, dim=4, seed=9)
    with pytest.raises(ValueError):
        dense_retrieve(other, P, ["alpha"], 2)


def _fixed_scores_encoder(s_pos, s_neg, K=4):
    # one query term; passage vectors chosen to give exact scores
    docs = [Document("P", "p")] + [Document(f"N{j}", f"n{j}") for j in range(K)]
    coll = Collection(docs)
    terms = ["q", "p"] + [f"n{j}" for j in range(K)]
    vocab = {t: i for i, t in enumerate(terms)}
    W_p = np.zeros((2, len(terms)))
    W_p[0, 1] = s_pos
    for j in range(K):
        W_p[0, 2 + j] = s_neg
    W_q = np.zeros_like(W_p)
    W_q[0, 0] = 1.0
    enc = DenseEncoder(vocab, W_q, W_p)
    batch = TrainingBatch("q", "P", tuple(f"N{j}" for j in range(K)))
    return enc, batch, PassageIndex(enc, coll)


def test_ranking_loss_uniform_and_saturated():
    enc, batch, P = _fixed_scores_encoder(0.7, 0.7)
    assert ranking_loss(enc, batch, P)[0] == pytest.approx(np.log(5), abs=1e-12)
    enc, batch, P = _fixed_scores_encoder(10.0, -10.0)
    assert ranking_loss(enc, batch, P)[0] <= 1e-8
    enc, batch, P = _fixed_scores_encoder(1000.0, -1000.0)
    loss, g = ranking_loss(enc, batch, P)
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_loss_positive_and_decreasing_in_positive_score():
    losses = [ranking_loss(*_fixed_scores_encoder(s, 0.0))[0] for s in (-1.0, 0.0, 1.0, 3.0)]
    assert all(x > 0 for x in losses)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_batch_validation():
    with pytest.raises(ValueError):
        TrainingBatch("q", "a", ())
    with pytest.raises(ValueError):
        TrainingBatch("q", "a", ("a", "b"))


@pytest.mark.parametrize("seed", range(20))
def test_ranking_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    coll, words = random_collection(rng)
    enc = init_encoder(coll, dim=4, seed=seed, scale=2.0)
    enc.W_q += rng.normal(0, 0.5, enc.W_q.shape)
    P = PassageIndex(enc, coll)
    query = " ".join(rng.choice(words, size=5))
    ids = rng.permutation(coll.doc_ids)
    batch = TrainingBatch(query, ids[0], tuple(ids[1:5]))
    _, g = ranking_loss(enc, batch, P)
    num = fd_grad(lambda: ranking_loss(enc, batch, P)[0], enc.W_q)
    assert rel_error(g, num) < 1e-4


def _pairs(coll):
    return [(coll[i].text.split()[0] + " " + coll[i].text.split()[-1], coll[i].doc_id) for i in range(len(coll))]


def test_training_reduces_loss_and_freezes_passages():
    rng = np.random.default_rng(0)
    coll, _ = random_collection(rng, num_docs=20)
    enc = init_encoder(coll, dim=8)
    P = PassageIndex(enc, coll)
    batches = make_batches(_pairs(coll), coll, num_negatives=4, seed=1)
    W_p_before = enc.W_p.copy()
    hist = []
    trained = train_retriever(enc, batches, P, lr=0.05, epochs=50, seed=0, history=hist)
    assert hist[-1]["L_R"] < hist[0]["L_R"]
    assert mean_ranking_loss(trained, batches, P) < mean_ranking_loss(enc, batches, P)
    assert trained.W_p.tobytes() == W_p_before.tobytes()
    assert enc.W_q.tobytes() == W_p_before.tobytes()


def test_training_no_ops_and_determinism():
    rng = np.random.default_rng(1)
    coll, _ = random_collection(rng, num_docs=10)
    enc = init_encoder(coll, dim=4)
    P = PassageIndex(enc, coll)
    batches = make_batches(_pairs(coll), coll, num_negatives=3, seed=1)
    np.testing.assert_array_equal(train_retriever(enc, batches, P, epochs=0).W_q, enc.W_q)
    np.testing.assert_array_equal(train_retriever(enc, [], P, epochs=3).W_q, enc.W_q)
    a = train_retriever(enc, batches, P, epochs=3, seed=5)
    b = train_retriever(enc, batches, P, epochs=3, seed=5)
    assert a.W_q.tobytes() == b.W_q.tobytes()
    with pytest.raises(ValueError):
        train_retriever(enc, batches, P, lr=0)


def test_negatives_exclude_relevant():
    coll, _ = random_collection(np.random.default_rng(2), num_docs=10)
    batches = make_batches([("t1", "D00")], coll, [{"D01", "D02"}], num_negatives=7, seed=0)
    assert not {"D00", "D01", "D02"} & set(batches[0].negatives)
    with pytest.raises(ValueError):
        make_batches([("t1", "D00")], coll, [{"D01", "D02"}], num_negatives=8)


def test_encoder_roundtrip(tmp_path):
    enc = init_encoder(SMALL, dim=3)
    enc.W_q[0, 0] = 0.123456789
    save_encoder(enc, tmp_path / "e.json")
    back = load_encoder(tmp_path / "e.json")
    assert back.vocab == enc.vocab
    np.testing.assert_array_equal(back.W_q, enc.W_q)
    np.testing.assert_array_equal(back.W_p, enc.W_p)
    (tmp_path / "bad.json").write_text('{"version": 0}')
    with pytest.raises(DataError):
        load_encoder(tmp_path / "bad.json")


def test_retriever_wrapper():
    enc = identity_encoder(SMALL)
    assert DenseRetriever(enc, SMALL).retrieve("Gamma!", 1, "k").doc_ids == ["D2"]
