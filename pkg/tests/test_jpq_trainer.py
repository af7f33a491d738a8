import dataclasses
import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jpq.core import CorruptIndexError, InvalidArgumentError, RelevanceLabels
from jpq.data import SyntheticSpec, generate_synthetic
from jpq.encoder import EncoderParams, Layer, QuerySet, encode, init_encoder
from jpq.jpq_trainer import (
    VARIANTS,
    DivergenceError,
    JpqConfig,
    PairGradient,
    TrainState,
    ablation_variants,
    centroid_gradients,
    evaluate_state,
    jpq_train,
    pairwise_loss,
    query_encoder_gradients,
    ranking_oriented_loss,
    retrieve_negative_pool,
    sample_negatives_end_to_end,
    write_metrics_csv,
)
from jpq.pq_index import (
    Codebook,
    CodeMatrix,
    build_lookup_table,
    quantize_corpus,
    reconstruct,
    train_opq_rotation,
)


def random_orthonormal(D, rng):
    q, r = np.linalg.qr(rng.normal(size=(D, D)))
    return q * np.sign(np.diag(r))


def digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


@pytest.fixture(scope="module")
def small_setup():
    ds = generate_synthetic(SyntheticSpec(num_docs=300, num_train_queries=120, num_eval_queries=40,
                                          feature_dim=8, noise_scale=0.1, num_clusters=10, seed=4))
    pq = init_encoder(8, 8, hidden=(16,), seed=1)
    pd = init_encoder(8, 8, hidden=(16,), seed=2)
    E = encode(pd, ds.corpus.features)
    cb = train_opq_rotation(E, 4, 8, outer_iters=2, seed=0)
    codes = quantize_corpus(cb, E, ds.corpus.doc_ids)
    return ds, TrainState.initial(pq, cb, codes, E)


# --- loss and alpha -------------------------------------------------------------------------

def test_ranknet_saturated_pair():
    loss, alpha = pairwise_loss(1000.0, -1000.0, "ranknet")
    assert loss == pytest.approx(0.0, abs=1e-12) and alpha == pytest.approx(0.0, abs=1e-12)


def test_ranknet_tied_pair():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(2, 4, 3)))
    loss, alpha = ranking_oriented_loss(rng.normal(size=6), [1, 2], [1, 2], cb, "ranknet")
    assert loss == pytest.approx(math.log(2)) and alpha == pytest.approx(0.5)


@pytest.mark.parametrize("kind,weight", [("ranknet", 1.0), ("lambdarank", 0.37)])
def test_alpha_matches_finite_difference(kind, weight):
    rng = np.random.default_rng(1)
    for _ in range(20):
        sp, sn = rng.normal(size=2) * 3
        h = 1e-6
        _, alpha = pairwise_loss(sp, sn, kind, weight)
        up = pairwise_loss(sp, sn + h, kind, weight)[0]
        down = pairwise_loss(sp, sn - h, kind, weight)[0]
        assert alpha == pytest.approx((up - down) / (2 * h), abs=1e-6)
        up = pairwise_loss(sp + h, sn, kind, weight)[0]
        down = pairwise_loss(sp - h, sn, kind, weight)[0]
        assert alpha == pytest.approx(-(up - down) / (2 * h), abs=1e-6)


@given(st.floats(-50, 50), st.floats(-50, 50), st.sampled_from(["ranknet", "lambdarank", "hinge"]),
       st.floats(0, 1))
def test_alpha_non_negative(sp, sn, kind, weight):
    assert pairwise_loss(sp, sn, kind, weight)[1] >= 0


def test_ranking_loss_invalid_codes():
    cb = Codebook(np.zeros((2, 4, 1)))
    with pytest.raises(CorruptIndexError):
        ranking_oriented_loss(np.zeros(2), [0, 4], [0, 0], cb)


# --- centroid gradients ------------------------------------------------------------------------

def test_centroid_gradient_cancels_when_codes_match():
    q_sub = np.ones((3, 2))
    p = PairGradient(0.7, q_sub, np.array([1, 2, 3]), np.array([1, 2, 3]))
    assert centroid_gradients([p], Codebook(np.zeros((3, 4, 2)))) == {}


def test_centroid_gradient_single_subspace_cases():
    q = np.array([[0.5, -2.0]])
    p = PairGradient(0.3, q, np.array([2]), np.array([5]))
    g = centroid_gradients([p], Codebook(np.zeros((1, 8, 2))))
    assert set(g) == {(0, 2), (0, 5)}
    assert np.array_equal(g[(0, 2)], -0.3 * q[0])
    assert np.array_equal(g[(0, 5)], 0.3 * q[0])


def test_centroid_gradient_partial_cancellation():
    q = np.arange(6.0).reshape(3, 2)
    p = PairGradient(1.0, q, np.array([0, 1, 2]), np.array([0, 3, 2]))
    g = centroid_gradients([p], Codebook(np.zeros((3, 4, 2))))
    assert set(g) == {(1, 1), (1, 3)}


def total_pq_loss(cb, queries, pos_codes, neg_codes, kind, weights):
    return sum(ranking_oriented_loss(q, cp, cn, cb, kind, w)[0]
               for q, cp, cn, w in zip(queries, pos_codes, neg_codes, weights))


@pytest.mark.parametrize("kind", ["ranknet", "lambdarank"])
def test_centroid_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(2)
    D, M, K, B = 12, 3, 4, 10
    cb = Codebook(rng.normal(size=(M, K, D // M)), random_orthonormal(D, rng))
    queries = rng.normal(size=(B, D))
    pos = rng.integers(K, size=(B, M))
    neg = rng.integers(K, size=(B, M))
    neg[0] = pos[0]  # a fully cancelling pair
    weights = rng.uniform(0.1, 1.0, size=B) if kind == "lambdarank" else np.ones(B)
    pairs = []
    for q, cp, cn, w in zip(queries, pos, neg, weights):
        _, alpha = ranking_oriented_loss(q, cp, cn, cb, kind, w)
        pairs.append(PairGradient(alpha, (cb.rotation @ q).reshape(M, -1), cp, cn))
    grad = centroid_gradients(pairs, cb)
    h = 1e-4
    C = cb.centroids.copy()
    for i in range(M):
        for j in range(K):
            for c in range(D // M):
                Cp, Cm = C.copy(), C.copy()
                Cp[i, j, c] += h
                Cm[i, j, c] -= h
                num = (total_pq_loss(cb.with_centroids(Cp), queries, pos, neg, kind, weights)
                       - total_pq_loss(cb.with_centroids(Cm), queries, pos, neg, kind, weights)) / (2 * h)
                ana = grad[(i, j)][c] if (i, j) in grad else 0.0
                assert ana == pytest.approx(num, rel=1e-4, abs=1e-7)


# --- query encoder gradients -----------------------------------------------------------------------

def test_query_gradient_zero_alpha():
    p = init_encoder(4, 6, seed=0, dtype=np.float64)
    g = query_encoder_gradients(p, np.ones((2, 4)), [0.0, 0.0], np.ones((2, 6)), np.zeros((2, 6)))
    assert all(np.all(x == 0) for x in g.grads)


def test_query_gradient_linear_closed_form():
    rng = np.random.default_rng(3)
    p = init_encoder(5, 4, hidden=(), seed=0, dtype=np.float64)
    X = rng.normal(size=(3, 5))
    a = np.array([0.2, 0.0, 0.9])
    dp, dn = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cb = Codebook(np.zeros((2, 2, 2)), np.eye(4))
    g = query_encoder_gradients(p, X, a, dp, dn, cb)
    expected = sum(a[b] * np.outer(dn[b] - dp[b], X[b]) for b in range(3))
    assert np.allclose(g.grads[0], expected)


def test_query_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    D, M, K, F, B = 8, 2, 4, 5, 6
    cb = Codebook(rng.normal(size=(M, K, D // M)), random_orthonormal(D, rng))
    p = init_encoder(F, D, hidden=(7,), seed=3, dtype=np.float64)
    p = p.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in p.arrays()])
    X = rng.normal(size=(B, F))
    pos = rng.integers(K, size=(B, M))
    neg = rng.integers(K, size=(B, M))

    def total(params):
        Q = encode(params, X)
        return sum(ranking_oriented_loss(q, cp, cn, cb, "ranknet")[0] for q, cp, cn in zip(Q, pos, neg))

    Q = encode(p, X)
    alphas = [ranking_oriented_loss(q, cp, cn, cb, "ranknet")[1] for q, cp, cn in zip(Q, pos, neg)]
    rp = np.array([reconstruct(cb, c) for c in pos])
    rn = np.array([reconstruct(cb, c) for c in neg])
    analytic = query_encoder_gradients(p, X, alphas, rp, rn, cb).grads
    arrays = [a.copy() for a in p.arrays()]
    h = 1e-4
    for k, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = total(p.with_arrays(arrays))
            a[idx] = orig - h
            down = total(p.with_arrays(arrays))
            a[idx] = orig
            assert analytic[k][idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)


def test_query_gradient_shape_mismatch():
    p = init_encoder(4, 6, seed=0)
    with pytest.raises(InvalidArgumentError):
        query_encoder_gradients(p, np.ones((3, 4)), [1.0, 1.0], np.ones((2, 6)), np.zeros((2, 6)))


# --- negatives ----------------------------------------------------------------------------------

def test_forced_single_negative():
    rng = np.random.default_rng(5)
    cb = Codebook(rng.normal(size=(2, 4, 2)))
    codes = CodeMatrix(rng.integers(4, size=(6, 2)).astype(np.uint8), list("abcdef"))
    state = TrainState.initial(EncoderParams((Layer(np.eye(4), np.zeros(4)),)), cb, codes)
    out = sample_negatives_end_to_end(state, rng.normal(size=(1, 4)), [{0, 1, 2, 4, 5}], 3, 1, rng)
    assert out[0].rows.tolist() == [3]


def test_negative_pool_needs_deeper_retrieval():
    cb = Codebook(np.array([[[1.0], [0.0]]]))
    codes = CodeMatrix(np.array([[0], [0], [0], [1]], dtype=np.uint8), list("abcd"))
    table = build_lookup_table(cb, [1.0])
    pool, ranks = retrieve_negative_pool(table, codes, {0, 1, 2}, 1)
    assert pool.tolist() == [3] and ranks.tolist() == [4]
    with pytest.raises(InvalidArgumentError):
        retrieve_negative_pool(table, codes, {0, 1, 2, 3}, 1)


def brute_force_irrelevant(state, q, positives, n_hat):
    qr = state.codebook.rotation.astype(np.float64) @ q
    scores = [qr @ reconstruct(state.codebook, row).astype(np.float64) for row in state.codes.codes]
    order = sorted(range(len(scores)), key=lambda r: (-scores[r], r))
    return [r for r in order if r not in positives][:n_hat]


def test_negative_sampling_contract(small_setup):
    ds, state = small_setup
    rng = np.random.default_rng(6)
    X = ds.train_queries.features
    n_docs = len(state.codes)
    for trial in range(50):
        idx = rng.choice(len(X), size=4, replace=False)
        positives = [set(rng.choice(n_docs, size=rng.integers(1, 20), replace=False).tolist())
                     for _ in idx]
        n_hat = int(rng.integers(1, 40))
        k = int(rng.integers(1, n_hat + 1))
        samples = sample_negatives_end_to_end(state, X[idx], positives, n_hat, k, rng)
        Q = encode(state.query_params, X[idx])
        for s, pos, q in zip(samples, positives, Q):
            assert not set(s.rows.tolist()) & pos
            assert len(s.rows) == k
            assert s.pool.tolist() == brute_force_irrelevant(state, q, pos, n_hat)
        full = sample_negatives_end_to_end(state, X[idx], positives, n_hat, n_hat, rng)
        for s, pos, q in zip(full, positives, Q):
            assert sorted(s.rows.tolist()) == sorted(brute_force_irrelevant(state, q, pos, n_hat))
    with pytest.raises(InvalidArgumentError):
        sample_negatives_end_to_end(state, X[:1], [{0}], 2, 3, rng)


# --- training loop ---------------------------------------------------------------------------------

def cfg(**kw):
    base = dict(batch_size=8, n_hat=20, lr_query=1e-3, lr_centroids=1e-3, steps=30, eval_every=10,
                seed=3)
    base.update(kw)
    return JpqConfig(**base)


def test_zero_steps_is_identity(small_setup):
    ds, state = small_setup
    trained, metrics = jpq_train(state, ds.train_queries, ds.train_labels, cfg(steps=0))
    assert metrics == []
    assert trained.codebook.centroids.tobytes() == state.codebook.centroids.tobytes()
    assert [a.tobytes() for a in trained.query_params.arrays()] == \
        [a.tobytes() for a in state.query_params.arrays()]


def test_training_freezes_codes_and_rotation(small_setup):
    ds, state = small_setup
    before = (digest(state.codes.codes), digest(state.codebook.rotation), state.codebook.centroids.copy())
    trained, metrics = jpq_train(state, ds.train_queries, ds.train_labels, cfg(),
                                 ds.eval_queries, ds.eval_labels)
    assert digest(trained.codes.codes) == before[0]
    assert digest(trained.codebook.rotation) == before[1]
    assert trained.codes.doc_ids == state.codes.doc_ids
    # the input state is untouched
    assert np.array_equal(state.codebook.centroids, before[2])
    assert not np.array_equal(trained.codebook.centroids, before[2])
    assert [m.step for m in metrics] == list(range(1, 31))
    assert [m.step for m in metrics if m.mrr10 is not None] == [10, 20, 30]


def test_frozen_centroid_group(small_setup):
    ds, state = small_setup
    trained, _ = jpq_train(state, ds.train_queries, ds.train_labels, cfg(lr_centroids=0.0))
    assert trained.codebook.centroids.tobytes() == state.codebook.centroids.tobytes()
    assert any(not np.array_equal(a, b) for a, b in
               zip(trained.query_params.arrays(), state.query_params.arrays()))


def test_single_step_only_touches_pair_centroids(small_setup):
    ds, state = small_setup
    qid = ds.train_queries.query_ids[0]
    queries = ds.train_queries.subset([qid])
    labels = RelevanceLabels({qid: ds.train_labels[qid]})
    trained, _ = jpq_train(state, queries, labels, cfg(batch_size=1, n_hat=1, steps=1, lr_query=0.0))
    q = encode(state.query_params, queries.features[0])
    pos_rows = {state.codes.doc_ids.index(d) for d in labels[qid]}
    neg = brute_force_irrelevant(state, q, pos_rows, 1)[0]
    expected = set()
    for p in pos_rows:
        for i, (a, b) in enumerate(zip(state.codes.codes[p], state.codes.codes[neg])):
            if a != b:
                expected |= {(i, int(a)), (i, int(b))}
    changed = np.any(trained.codebook.centroids != state.codebook.centroids, axis=2)
    assert {tuple(map(int, ij)) for ij in np.argwhere(changed)} == expected


def test_training_is_deterministic(small_setup):
    ds, state = small_setup
    a, ma = jpq_train(state, ds.train_queries, ds.train_labels, cfg())
    b, mb = jpq_train(state, ds.train_queries, ds.train_labels, cfg())
    assert a.codebook.centroids.tobytes() == b.codebook.centroids.tobytes()
    assert ma == mb


def test_divergence_guard(small_setup):
    ds, state = small_setup
    bad = QuerySet(ds.train_queries.query_ids, np.full_like(ds.train_queries.features, np.nan))
    with pytest.raises(DivergenceError) as exc:
        jpq_train(state, bad, ds.train_labels, cfg())
    assert exc.value.last_good is not None


def test_full_scores_need_embeddings(small_setup):
    ds, state = small_setup
    bare = dataclasses.replace(state, doc_embeddings=None)
    with pytest.raises(InvalidArgumentError):
        jpq_train(bare, ds.train_queries, ds.train_labels, cfg(loss_scores="full"))


def test_ablation_zero_steps_identical(small_setup):
    ds, state = small_setup
    out = ablation_variants(state, ds.train_queries, ds.train_labels, ds.eval_queries, ds.eval_labels,
                            cfg(steps=0))
    assert list(out) == list(VARIANTS)
    values = [r.values for r in out.values()]
    assert all(v == values[0] for v in values)


def test_ablation_variants_share_codes(small_setup):
    ds, state = small_setup
    out = ablation_variants(state, ds.train_queries, ds.train_labels, ds.eval_queries, ds.eval_labels,
                            cfg(steps=5))
    assert set(out) == set(VARIANTS)
    for r in out.values():
        assert set(r.values) == {"mrr@10", "mrr@100", "recall@10", "recall@100"}
    assert digest(state.codes.codes) == digest(quantize_corpus(
        state.codebook, encode(init_encoder(8, 8, hidden=(16,), seed=2),
                               ds.corpus.features)).codes)


def test_config_file_roundtrip(tmp_path):
    c = cfg(pairwise_loss="ranknet")
    (tmp_path / "c.cfg").write_text(c.to_text())
    assert JpqConfig.from_file(tmp_path / "c.cfg") == c
    assert JpqConfig.from_file(tmp_path / "c.cfg", {"steps": "7"}).steps == 7
    with pytest.raises(InvalidArgumentError):
        JpqConfig(n_hat=1, negatives_per_query=2)
    with pytest.raises(InvalidArgumentError):
        JpqConfig(lr_query=-1.0)


def test_metrics_csv(small_setup, tmp_path):
    ds, state = small_setup
    _, metrics = jpq_train(state, ds.train_queries, ds.train_labels, cfg(steps=10, eval_every=5),
                           ds.eval_queries, ds.eval_labels)
    write_metrics_csv(metrics, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,loss,mrr10,recall100"
    assert len(lines) == 11
    assert lines[1].endswith(",,") and not lines[5].endswith(",,")


def test_evaluate_state_matches_exhaustive(small_setup):
    ds, state = small_setup
    report = evaluate_state(state, ds.eval_queries, ds.eval_labels)
    Q = encode(state.query_params, ds.eval_queries.features)
    rr = []
    for qid, q in zip(ds.eval_queries.query_ids, Q):
        order = brute_force_irrelevant(state, q, set(), 10)
        rel = {state.codes.doc_ids.index(d) for d in ds.eval_labels[qid]}
        first = next((i for i, r in enumerate(order, 1) if r in rel), None)
        rr.append(0.0 if first is None else 1 / first)
    assert report["mrr@10"] == pytest.approx(np.mean(rr))
