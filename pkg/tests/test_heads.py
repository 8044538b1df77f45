import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbdc import heads, kernel
from deepbdc.errors import InvalidInputError, ShapeError
from deepbdc.gradcheck import numeric_grad

# -- independent oracles ---------------------------------------------------


def naive_cov(x):
    n, d = len(x), len(x[0])
    mu = [sum(x[i][k] for i in range(n)) / n for k in range(d)]
    return np.array([
        [sum((x[i][a] - mu[a]) * (x[i][b] - mu[b]) for i in range(n)) / n for b in range(d)]
        for a in range(d)
    ])


def spectral_kl(mu_q, cov_q, mu_p, cov_p):
    wp, vp = np.linalg.eigh(cov_p)
    wq = np.linalg.eigvalsh(cov_q)
    p_inv = (vp / wp) @ vp.T
    diff = mu_p - mu_q
    d = len(mu_q)
    return 0.5 * (np.trace(p_inv @ cov_q) + diff @ p_inv @ diff - d
                  + np.sum(np.log(wp)) - np.sum(np.log(wq)))


def random_sets(rng, n_cls, shots, n, d):
    support = [[rng.normal(size=(n, d)) + k for _ in range(shots)] for k in range(n_cls)]
    query = [rng.normal(size=(n, d)) for _ in range(4)]
    return support, query


# -- prototypes ------------------------------------------------------------


@pytest.mark.parametrize("mode", heads.PROTOTYPE_MODES)
def test_single_shot_prototype_unchanged(mode):
    obs = np.random.default_rng(0).normal(size=(5, 7))
    a = kernel.bdc_matrix(obs)
    np.testing.assert_allclose(heads.prototype_bdc([a], mode, [obs]).data, a)


def test_avg_prototype_identical_inputs():
    a = kernel.bdc_matrix(np.random.default_rng(1).normal(size=(4, 3)))
    np.testing.assert_array_equal(heads.prototype_bdc([a, a]).data, a)


def test_avg_prototype_naive_mean():
    rng = np.random.default_rng(2)
    mats = [kernel.bdc_matrix(rng.normal(size=(6, 4))) for _ in range(5)]
    expected = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            expected[i, j] = sum(m[i, j] for m in mats) / 5
    np.testing.assert_allclose(heads.prototype_bdc(mats).data, expected, atol=1e-12)


def test_variant_prototypes():
    rng = np.random.default_rng(3)
    obs = [rng.normal(size=(4, 6)) for _ in range(3)]
    mats = [kernel.bdc_matrix(o) for o in obs]
    avg = heads.prototype_bdc(mats, "avg_features", obs).data
    cat = heads.prototype_bdc(mats, "concat_features", obs).data
    np.testing.assert_allclose(avg, kernel.bdc_matrix(sum(obs) / 3), atol=1e-12)
    np.testing.assert_allclose(cat, kernel.bdc_matrix(np.hstack(obs)), atol=1e-12)
    with pytest.raises(InvalidInputError):
        heads.prototype_bdc(mats, "avg_features")


def test_empty_support():
    with pytest.raises(InvalidInputError):
        heads.prototype_bdc([])


# -- similarity ------------------------------------------------------------


def test_similarity_self():
    a = kernel.bdc_matrix(np.random.default_rng(4).normal(size=(5, 2)))
    assert heads.similarity(a, a, "cosine") == pytest.approx(1.0)
    assert heads.similarity(a, a, "neg_sq_euclidean") == 0.0


def test_inner_product_matches_vectorized_dot():
    rng = np.random.default_rng(5)
    a, b = (kernel.bdc_matrix(rng.normal(size=(6, 3))) for _ in range(2))
    assert abs(heads.similarity(a, b) - kernel.vectorize(a) @ kernel.vectorize(b)) < 1e-10


def test_cosine_zero_norm():
    assert heads.similarity(np.zeros((3, 3)), np.eye(3), "cosine") == 0.0


def test_similarity_shape_mismatch():
    with pytest.raises(ShapeError):
        heads.similarity(np.zeros((3, 3)), np.zeros((4, 4)))


# -- meta loss -------------------------------------------------------------


def test_meta_loss_uniform_scores():
    q = np.zeros((3, 4, 4))
    protos = np.random.default_rng(6).normal(size=(5, 4, 4))
    res = heads.meta_loss(q, [0, 2, 4], protos, tau=3.0)
    assert res.loss == pytest.approx(math.log(5), abs=1e-14)


def test_meta_loss_hand_softmax():
    res = heads.meta_loss(np.array([[1.0, 0.0]]), [0], np.array([[1.0, 0.0], [0.0, 0.0]]), 1.0)
    assert res.loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert res.loss == pytest.approx(0.31326, abs=1e-5)


@pytest.mark.parametrize("kind", heads.SIMILARITIES)
def test_meta_loss_gradients(kind):
    rng = np.random.default_rng(7)
    q = rng.normal(size=(6, 3, 3))
    p = rng.normal(size=(3, 3, 3))
    labels = np.array([0, 1, 2, 0, 1, 2])
    tau = np.array(0.7)
    res = heads.meta_loss(q, labels, p, float(tau), kind)

    def f():
        return heads.meta_loss(q, labels, p, float(tau), kind).loss

    np.testing.assert_allclose(res.grad_queries, numeric_grad(f, q), atol=1e-8)
    np.testing.assert_allclose(res.grad_prototypes, numeric_grad(f, p), atol=1e-8)
    h = 1e-6
    num_tau = (heads.meta_loss(q, labels, p, 0.7 + h, kind).loss
               - heads.meta_loss(q, labels, p, 0.7 - h, kind).loss) / (2 * h)
    assert res.grad_tau == pytest.approx(num_tau, rel=1e-5)


def test_meta_loss_label_range():
    with pytest.raises(InvalidInputError):
        heads.meta_loss(np.zeros((1, 2)), [2], np.zeros((2, 2)), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_argmax_invariant_to_tau(tau, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(8, 10))
    p = rng.normal(size=(4, 10))
    base = heads.meta_loss(q, np.zeros(8, dtype=int), p, 1.0).scores
    scaled = heads.meta_loss(q, np.zeros(8, dtype=int), p, tau).scores
    assert np.array_equal(np.argmax(base, 1), np.argmax(scaled, 1))


def test_bdc_head_scaling_robustness():
    rng = np.random.default_rng(8)
    sup = [rng.normal(size=(5, 12)) * (k + 1) for k in range(3)]
    qry = [rng.normal(size=(5, 12)) for _ in range(6)]
    s = 3.7

    def scores(scale):
        p = np.stack([kernel.bdc_matrix(scale * x) for x in sup])
        q = np.stack([kernel.bdc_matrix(scale * x) for x in qry])
        return heads.similarity_matrix(q, p)

    np.testing.assert_allclose(scores(s), s**2 * scores(1.0), rtol=1e-10)
    assert np.array_equal(np.argmax(scores(s), 1), np.argmax(scores(1.0), 1))


def test_cross_entropy_nonnegative():
    scores = np.random.default_rng(9).normal(size=(10, 4)) * 5
    loss, _ = heads.softmax_cross_entropy(scores, np.arange(10) % 4)
    assert loss >= 0


# -- STL logits ------------------------------------------------------------


def test_stl_logits_zero_rep():
    w = heads.ClassifierWeights.init(4, 3, np.random.default_rng(0), tau=2.0)
    assert not heads.stl_logits(np.zeros(6), w).any()


def test_stl_logits_one_hot_weights():
    rep = np.arange(1.0, 7.0)
    w = heads.ClassifierWeights(np.eye(6)[[2, 5]], tau=0.5)
    np.testing.assert_allclose(heads.stl_logits(rep, w), [1.5, 3.0])


def test_stl_logits_trace_form():
    rng = np.random.default_rng(10)
    a = kernel.bdc_matrix(rng.normal(size=(5, 4)))
    w = heads.ClassifierWeights.init(3, 5, rng, tau=1.3)
    logits = heads.stl_logits(kernel.vectorize(a), w)
    expected = [1.3 * np.trace(a.T @ w.matrix(k)) for k in range(3)]
    np.testing.assert_allclose(logits, expected, atol=1e-10)


def test_stl_loss_gradients():
    rng = np.random.default_rng(11)
    reps = rng.normal(size=(5, 6))
    labels = np.array([0, 1, 2, 1, 0])
    w = heads.ClassifierWeights(rng.normal(size=(3, 6)), 0.8)
    _, _, g_reps, g_w, g_tau = heads.stl_loss(reps, labels, w)
    f = lambda: heads.stl_loss(reps, labels, w)[0]  # noqa: E731
    np.testing.assert_allclose(g_reps, numeric_grad(f, reps), atol=1e-8)
    np.testing.assert_allclose(g_w, numeric_grad(f, w.weights), atol=1e-8)
    h = 1e-6
    up = heads.stl_loss(reps, labels, heads.ClassifierWeights(w.weights, 0.8 + h))[0]
    dn = heads.stl_loss(reps, labels, heads.ClassifierWeights(w.weights, 0.8 - h))[0]
    assert g_tau == pytest.approx((up - dn) / (2 * h), rel=1e-6)


def test_stl_logits_shape_mismatch():
    w = heads.ClassifierWeights.init(2, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        heads.stl_logits(np.zeros(5), w)


# -- ProtoNet --------------------------------------------------------------


def test_protonet_query_equals_mean():
    rng = np.random.default_rng(12)
    support = [[rng.normal(size=(4, 3))], [rng.normal(size=(4, 3)) + 5]]
    query = [support[0][0]]
    scores = heads.protonet_head(support, query)
    assert scores[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert np.argmax(scores[0]) == 0


def test_protonet_symmetric_classes():
    v = np.array([1.0, -2.0, 0.5])
    support = [[np.tile(v, (3, 1))], [np.tile(-v, (3, 1))]]
    assert np.argmax(heads.protonet_head(support, [np.tile(v, (2, 1))])[0]) == 0


def test_protonet_naive_oracle():
    rng = np.random.default_rng(13)
    support, query = random_sets(rng, 3, 2, 5, 4)
    scores = heads.protonet_head(support, query)
    for i, q in enumerate(query):
        qm = [sum(r[k] for r in q) / len(q) for k in range(4)]
        for c, cls in enumerate(support):
            pm = [sum(sum(r[k] for r in f) / len(f) for f in cls) / len(cls) for k in range(4)]
            assert abs(scores[i, c] + sum((a - b) ** 2 for a, b in zip(qm, pm))) < 1e-12


# -- CovNet ----------------------------------------------------------------


def test_covnet_identical_features():
    x = np.random.default_rng(14).normal(size=(6, 3))
    scores = heads.covnet_head([[x] * 5], [x])
    assert scores[0, 0] == pytest.approx(0.0, abs=1e-14)


def test_covnet_scaling():
    x = np.random.default_rng(15).normal(size=(8, 3))
    for s in (2.5, -2.5):
        np.testing.assert_allclose(heads.covariance(s * x), s**2 * heads.covariance(x), rtol=1e-12)
        np.testing.assert_allclose(heads.signed_sqrt(heads.covariance(s * x)),
                                   abs(s) * heads.signed_sqrt(heads.covariance(x)), rtol=1e-12)


def test_covariance_naive_oracle():
    x = np.random.default_rng(16).normal(size=(7, 4))
    np.testing.assert_allclose(heads.covariance(x), naive_cov(x.tolist()), atol=1e-12)


def test_covnet_one_shot_uses_inner_product():
    rng = np.random.default_rng(17)
    support, query = random_sets(rng, 2, 1, 6, 3)
    scores = heads.covnet_head(support, query)
    q = heads.signed_sqrt(heads.covariance(query[0]))
    p = heads.signed_sqrt(heads.covariance(support[1][0]))
    assert scores[0, 1] == pytest.approx(np.sum(q * p))


def test_covnet_needs_two_observations():
    with pytest.raises(InvalidInputError):
        heads.covnet_head([[np.zeros((1, 3))]], [np.zeros((1, 3))])


# -- ADM -------------------------------------------------------------------


def test_kl_identical_gaussians():
    x = np.random.default_rng(18).normal(size=(10, 3))
    assert heads.adm_head([[x]], [x])[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_example():
    assert heads.gaussian_kl(np.zeros(2), np.eye(2), np.array([1.0, 0.0]), np.eye(2)) == pytest.approx(0.5)


def test_kl_spectral_oracle():
    rng = np.random.default_rng(19)
    for _ in range(20):
        d = rng.integers(2, 6)
        aq, ap = rng.normal(size=(2, d, d))
        cq, cp = aq @ aq.T + 0.1 * np.eye(d), ap @ ap.T + 0.1 * np.eye(d)
        mq, mp = rng.normal(size=(2, d))
        assert heads.gaussian_kl(mq, cq, mp, cp) == pytest.approx(spectral_kl(mq, cq, mp, cp), abs=1e-8)


def test_adm_pools_support_and_shrinks():
    rng = np.random.default_rng(20)
    support, query = random_sets(rng, 2, 3, 4, 6)  # 4 observations in 6-D: singular
    out = heads.adm_head(support, query)
    assert out.shape == (4, 2) and np.all(np.isfinite(out)) and np.all(out >= -1e-10)
    pooled = np.concatenate(support[1])
    mu_p, cov_p = pooled.mean(0), naive_cov(pooled.tolist())
    cov_p = cov_p + 0.01 * np.trace(cov_p) / 6 * np.eye(6)
    mu_q, cov_q = query[2].mean(0), naive_cov(query[2].tolist())
    cov_q = cov_q + 0.01 * np.trace(cov_q) / 6 * np.eye(6)
    assert out[2, 1] == pytest.approx(spectral_kl(mu_q, cov_q, mu_p, cov_p), rel=1e-8)


def test_adm_fixed_shrinkage_validation():
    x = np.random.default_rng(21).normal(size=(5, 2))
    with pytest.raises(ValueError):
        heads.adm_head([[x]], [x], shrinkage=0.0)


# -- logistic regression ---------------------------------------------------


def slow_gd_loss(x, y, lam, n_cls, steps=200000, lr=0.02):
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    w = np.zeros((x.shape[1], n_cls))
    b = np.zeros(n_cls)
    onehot = np.eye(n_cls)[y]

    def loss_grad(w, b):
        z = x @ w + b
        z = z - z.max(1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        loss = -np.sum(np.log(p[np.arange(len(y)), y])) + 0.5 * lam * np.sum(w * w)
        return loss, x.T @ (p - onehot) + lam * w, (p - onehot).sum(0)

    for _ in range(steps):
        loss, gw, gb = loss_grad(w, b)
        if np.sqrt(np.sum(gw**2) + np.sum(gb**2)) < 1e-10:
            break
        w -= lr * gw
        b -= lr * gb
    return loss_grad(w, b)[0]


def test_logreg_separable_clusters():
    x = np.array([[-3.0], [-2.5], [-2.0], [2.0], [2.5], [3.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = heads.logreg_fit(x, y, normalize=False)
    assert np.array_equal(heads.logreg_predict(model, x), y)


def test_logreg_identical_features_uniform():
    x = np.ones((6, 3))
    model = heads.logreg_fit(x, [0, 1, 2, 0, 1, 2])
    np.testing.assert_allclose(heads.logreg_predict_proba(model, x), 1 / 3, atol=1e-6)


def test_logreg_matches_slow_oracle():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(15, 4))
    y = np.arange(15) % 3
    model = heads.logreg_fit(x, y, lam=1.0, max_iters=5000, tol=1e-8)
    assert model.converged
    assert model.loss_history[-1] == pytest.approx(slow_gd_loss(x, y, 1.0, 3), abs=1e-4)


def test_logreg_monotone_loss():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(20, 5))
    model = heads.logreg_fit(x, np.arange(20) % 4, lam=0.1)
    assert all(b <= a for a, b in zip(model.loss_history, model.loss_history[1:]))


def test_logreg_single_class_rejected():
    with pytest.raises(InvalidInputError):
        heads.logreg_fit(np.ones((3, 2)), [1, 1, 1])


def test_logreg_label_values_preserved():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    model = heads.logreg_fit(x, [7, 3])
    assert list(heads.logreg_predict(model, x)) == [7, 3]
