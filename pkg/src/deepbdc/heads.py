"""
Similarity heads, prototypes, losses and the meta-test classifier.

Representations are plain arrays. BDC heads work on ``(m, m)`` BDC
matrices (or their vectorized form); the counterpart heads work directly on
per-image feature sets of shape ``(n, d)`` (``n`` local features of
dimension ``d``).

Score conventions: every ``*_head`` function returns a ``(Q, N)`` array
where larger means "more likely this class", except :func:`adm_head`,
which returns KL dissimilarities (smaller is closer).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernel
from .errors import InvalidInputError, NumericError, ShapeError

SIMILARITIES = ("inner_product", "neg_sq_euclidean", "cosine")
PROTOTYPE_MODES = ("avg_bdc", "avg_features", "concat_features")

_NORM_EPS = 1e-14


# --------------------------------------------------------------------------
# BDC prototypes and similarities


@dataclass
class Prototype:
    """Class representation tagged with the head that produced it."""

    kind: str  # "bdc", "mean" or "gaussian"
    data: object


def prototype_bdc(support: Sequence, mode: str = "avg_bdc", raw_features=None) -> Prototype:
    """Prototype of one class from its ``K`` support items.

    ``avg_bdc`` averages the support BDC matrices. The two variant modes need
    ``raw_features``, the support observation sets (rows are observations):
    ``avg_features`` averages them entrywise before computing one BDC matrix,
    ``concat_features`` joins their coordinates so each observation gathers
    all ``K`` images.
    """
    if mode not in PROTOTYPE_MODES:
        raise ValueError(f"unknown prototype mode {mode!r}")
    if len(support) == 0:
        raise InvalidInputError("empty support set")
    if mode == "avg_bdc":
        mats = np.asarray(support, dtype=np.float64)
        return Prototype("bdc", mats.mean(axis=0))
    if raw_features is None or len(raw_features) != len(support):
        raise InvalidInputError(f"mode {mode!r} needs one raw observation set per support item")
    if len(support) == 1:
        return Prototype("bdc", np.asarray(support[0], dtype=np.float64).copy())
    obs = [kernel.as_observations(f) for f in raw_features]
    if mode == "avg_features":
        return Prototype("bdc", kernel.bdc_matrix(np.mean(obs, axis=0)))
    return Prototype("bdc", kernel.bdc_matrix(np.concatenate(obs, axis=1)))


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def similarity_matrix(queries, protos, kind: str = "inner_product") -> np.ndarray:
    """Pairwise similarities between stacked queries ``(Q, ...)`` and
    prototypes ``(N, ...)``; trailing dimensions are flattened."""
    q = _flat(queries)
    p = _flat(protos)
    if q.shape[1] != p.shape[1]:
        raise ShapeError(f"query size {q.shape[1]} does not match prototype size {p.shape[1]}")
    if kind == "inner_product":
        return q @ p.T
    if kind == "neg_sq_euclidean":
        return -(np.sum(q * q, 1)[:, None] + np.sum(p * p, 1)[None, :] - 2.0 * q @ p.T)
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        pn = np.linalg.norm(p, axis=1)
        denom = qn[:, None] * pn[None, :]
        ok = (qn[:, None] >= _NORM_EPS) & (pn[None, :] >= _NORM_EPS)
        return np.where(ok, (q @ p.T) / np.where(ok, denom, 1.0), 0.0)
    raise ValueError(f"unknown similarity {kind!r}")


def similarity(query, proto, kind: str = "inner_product") -> float:
    """Similarity of one query representation to one prototype."""
    if isinstance(proto, Prototype):
        proto = proto.data
    query = np.asarray(query, dtype=np.float64)
    proto = np.asarray(proto, dtype=np.float64)
    if query.shape != proto.shape:
        raise ShapeError(f"query shape {query.shape} does not match prototype {proto.shape}")
    if kind == "neg_sq_euclidean":
        return float(-np.sum((query - proto) ** 2))
    return float(similarity_matrix(query[None], proto[None], kind)[0, 0])


def _similarity_grads(q, p, kind, g):
    """Given ``g = dL/dS`` for ``S = similarity_matrix(q, p)``, return
    ``(dL/dq, dL/dp)`` on the flattened representations."""
    if kind == "inner_product":
        return g @ p, g.T @ q
    if kind == "neg_sq_euclidean":
        # S_jk = -|q_j|^2 - |p_k|^2 + 2 q_j.p_k
        gq = -2.0 * g.sum(1)[:, None] * q + 2.0 * g @ p
        gp = -2.0 * g.sum(0)[:, None] * p + 2.0 * g.T @ q
        return gq, gp
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        pn = np.linalg.norm(p, axis=1)
        ok = (qn[:, None] >= _NORM_EPS) & (pn[None, :] >= _NORM_EPS)
        s = similarity_matrix(q, p, "cosine")
        g = np.where(ok, g, 0.0)
        qinv = np.where(qn >= _NORM_EPS, 1.0 / np.where(qn >= _NORM_EPS, qn, 1.0), 0.0)
        pinv = np.where(pn >= _NORM_EPS, 1.0 / np.where(pn >= _NORM_EPS, pn, 1.0), 0.0)
        w = g * qinv[:, None] * pinv[None, :]
        gq = w @ p - (g * s).sum(1)[:, None] * q * (qinv**2)[:, None]
        gp = w.T @ q - (g * s).sum(0)[:, None] * p * (pinv**2)[:, None]
        return gq, gp
    raise ValueError(f"unknown similarity {kind!r}")


# --------------------------------------------------------------------------
# Losses


def softmax(scores, axis=-1):
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(scores, labels):
    """Mean cross-entropy of ``(B, N)`` scores and its gradient wrt scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = scores.shape[1]
    if labels.shape != (scores.shape[0],):
        raise ShapeError("one label per score row is required")
    if np.any(labels < 0) or np.any(labels >= n):
        raise InvalidInputError(f"labels must lie in [0, {n})")
    z = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logz - z[rows, labels]))
    grad = softmax(scores, axis=1)
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


@dataclass
class MetaLossResult:
    loss: float
    scores: np.ndarray
    grad_queries: np.ndarray
    grad_prototypes: np.ndarray
    grad_tau: float


def meta_loss(query_reps, query_labels, prototypes, tau: float,
              kind: str = "inner_product") -> MetaLossResult:
    """Episode loss: mean over queries of ``-log softmax(tau * similarity)``.

    ``query_reps`` is ``(Q, ...)`` and ``prototypes`` is ``(N, ...)``; the
    returned gradients keep those shapes.
    """
    protos = np.asarray([p.data if isinstance(p, Prototype) else p for p in prototypes])
    q = np.asarray(query_reps, dtype=np.float64)
    if protos.shape[0] < 2:
        raise InvalidInputError("at least two prototypes are required")
    sims = similarity_matrix(q, protos, kind)
    scores = tau * sims
    loss, g_scores = softmax_cross_entropy(scores, query_labels)
    grad_tau = float(np.sum(g_scores * sims))
    gq, gp = _similarity_grads(_flat(q), _flat(protos), kind, tau * g_scores)
    return MetaLossResult(loss, scores, gq.reshape(q.shape), gp.reshape(protos.shape), grad_tau)


@dataclass
class ClassifierWeights:
    """Per-class weight matrices in vectorized form, plus the temperature."""

    weights: np.ndarray  # (n_classes, m*(m+1)/2)
    tau: float = 1.0

    @classmethod
    def init(cls, n_classes: int, m: int, rng, tau: float = 1.0):
        dim = kernel.vector_length(m)
        bound = 1.0 / np.sqrt(dim)
        return cls(rng.uniform(-bound, bound, size=(n_classes, dim)), tau)

    def matrix(self, k: int) -> np.ndarray:
        return kernel.unvectorize(self.weights[k])


def stl_logits(rep, weights: ClassifierWeights) -> np.ndarray:
    """Logits ``tau * <rep, w_k>`` for vectorized representation(s) ``rep``."""
    rep = np.asarray(rep, dtype=np.float64)
    if rep.shape[-1] != weights.weights.shape[1]:
        raise ShapeError(
            f"representation length {rep.shape[-1]} does not match weights {weights.weights.shape[1]}"
        )
    return weights.tau * rep @ weights.weights.T


def stl_loss(reps, labels, weights: ClassifierWeights):
    """Cross-entropy of :func:`stl_logits`.

    Returns ``(loss, logits, grad_reps, grad_weights, grad_tau)``.
    """
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    raw = reps @ weights.weights.T
    logits = weights.tau * raw
    loss, g = softmax_cross_entropy(logits, labels)
    grad_tau = float(np.sum(g * raw))
    g = weights.tau * g
    return loss, logits, g @ weights.weights, g.T @ reps, grad_tau


# --------------------------------------------------------------------------
# Counterpart heads


def _image_sets(features, name):
    arr = [np.asarray(f, dtype=np.float64) for f in features]
    if not arr:
        raise InvalidInputError(f"{name} is empty")
    for f in arr:
        if f.ndim != 2:
            raise ShapeError(f"{name} items must be (n, d) feature sets, got {f.shape}")
        if f.shape[1] != arr[0].shape[1]:
            raise ShapeError(f"{name} items disagree on feature dimension")
    return arr


def _class_sets(support):
    classes = [_image_sets(c, "support class") for c in support]
    if not classes:
        raise InvalidInputError("support is empty")
    return classes


def protonet_head(support_features, query_features, kind: str = "neg_sq_euclidean") -> np.ndarray:
    """Mean-vector prototypes scored by negative squared distance or cosine.

    ``support_features[c]`` lists the ``(n, d)`` feature sets of class ``c``;
    ``query_features`` lists query feature sets.
    """
    if kind not in ("neg_sq_euclidean", "cosine"):
        raise ValueError("protonet scores with neg_sq_euclidean or cosine")
    classes = _class_sets(support_features)
    queries = _image_sets(query_features, "query")
    protos = np.stack([np.mean([f.mean(axis=0) for f in c], axis=0) for c in classes])
    q = np.stack([f.mean(axis=0) for f in queries])
    return similarity_matrix(q, protos, kind)


def covariance(x) -> np.ndarray:
    """Biased covariance ``(1/n) sum (x - mu)(x - mu)^T`` of an ``(n, d)`` set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (n, d) feature set, got {x.shape}")
    if x.shape[0] < 2:
        raise InvalidInputError("covariance needs at least two observations")
    xc = x - x.mean(axis=0)
    return xc.T @ xc / x.shape[0]


def signed_sqrt(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.sign(a) * np.sqrt(np.abs(a))


def covnet_head(support_features, query_features, shot: int | None = None) -> np.ndarray:
    """Signed-sqrt covariance head.

    1-shot scores by inner product; multi-shot by negative squared Frobenius
    distance to the mean of the support covariances.
    """
    classes = _class_sets(support_features)
    queries = _image_sets(query_features, "query")
    if shot is None:
        shot = len(classes[0])
    protos = np.stack([np.mean([signed_sqrt(covariance(f)) for f in c], axis=0) for c in classes])
    q = np.stack([signed_sqrt(covariance(f)) for f in queries])
    kind = "inner_product" if shot == 1 else "neg_sq_euclidean"
    return similarity_matrix(q, protos, kind)


def default_shrinkage(cov) -> float:
    """``0.01 * trace(cov) / d``, falling back to 1e-6 for a zero trace."""
    lam = 0.01 * float(np.trace(cov)) / cov.shape[0]
    return lam if lam > 0 else 1e-6


def fit_gaussian(x, shrinkage: float | None = None):
    """Mean and shrunk covariance ``cov + lam * I`` of an ``(n, d)`` set."""
    x = np.asarray(x, dtype=np.float64)
    cov = covariance(x)
    lam = default_shrinkage(cov) if shrinkage is None else shrinkage
    if lam <= 0:
        raise ValueError("shrinkage must be positive")
    return x.mean(axis=0), cov + lam * np.eye(cov.shape[0])


def gaussian_kl(mu_q, cov_q, mu_p, cov_p) -> float:
    """Closed-form ``KL(N(mu_q, cov_q) || N(mu_p, cov_p))`` via Cholesky."""
    mu_q = np.asarray(mu_q, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    d = mu_q.shape[0]
    try:
        lp = np.linalg.cholesky(cov_p)
        lq = np.linalg.cholesky(cov_q)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance is not positive definite") from exc
    # tr(P^-1 Q) = |Lp^-1 Lq|_F^2
    m = np.linalg.solve(lp, lq)
    diff = np.linalg.solve(lp, mu_p - mu_q)
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    return float(0.5 * (np.sum(m * m) + diff @ diff - d + logdet_p - logdet_q))


def adm_head(support_features, query_features, shrinkage: float | None = None) -> np.ndarray:
    """KL dissimilarity of each query Gaussian to each class Gaussian.

    Class statistics pool all support observations of the class. With
    ``shrinkage=None`` each covariance gets its own relative shrinkage
    (:func:`default_shrinkage`).
    """
    classes = _class_sets(support_features)
    queries = _image_sets(query_features, "query")
    class_g = [fit_gaussian(np.concatenate(c, axis=0), shrinkage) for c in classes]
    out = np.empty((len(queries), len(classes)))
    for i, f in enumerate(queries):
        mu_q, cov_q = fit_gaussian(f, shrinkage)
        for k, (mu_p, cov_p) in enumerate(class_g):
            out[i, k] = gaussian_kl(mu_q, cov_q, mu_p, cov_p)
    return out


# --------------------------------------------------------------------------
# Logistic regression for meta-testing


@dataclass
class LogRegModel:
    coef: np.ndarray  # (n_features, n_classes)
    intercept: np.ndarray  # (n_classes,)
    classes: np.ndarray
    lam: float = 1.0
    normalize: bool = True
    n_iter: int = 0
    converged: bool = False
    loss_history: list = field(default_factory=list)


def l2_normalize(x, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def _logreg_objective(params, x, y_onehot, lam):
    n_feat = x.shape[1]
    w = params[: n_feat * y_onehot.shape[1]].reshape(n_feat, -1)
    b = params[n_feat * y_onehot.shape[1]:]
    z = x @ w + b
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    loss = np.sum(logsum - np.sum(z * y_onehot, axis=1)) + 0.5 * lam * np.sum(w * w)
    g = softmax(z, axis=1) - y_onehot
    grad = np.concatenate([(x.T @ g + lam * w).ravel(), g.sum(axis=0)])
    return float(loss), grad


def logreg_fit(features, labels, lam: float = 1.0, max_iters: int = 1000,
               tol: float = 1e-6, normalize: bool = True) -> LogRegModel:
    """Multinomial logistic regression by gradient descent with backtracking.

    Minimizes ``sum_i CE_i + (lam/2) |W|^2`` (intercepts unpenalized).
    Features are L2-normalized first when ``normalize`` is set; the flag is
    stored so :func:`logreg_predict` applies the same transform.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be a 2-D array")
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise InvalidInputError("logistic regression needs at least two classes")
    if normalize:
        x = l2_normalize(x)
    n_feat, n_cls = x.shape[1], len(classes)
    onehot = np.eye(n_cls)[y]
    params = np.zeros(n_feat * n_cls + n_cls)
    loss, grad = _logreg_objective(params, x, onehot, lam)
    history = [loss]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        gnorm2 = float(grad @ grad)
        if np.sqrt(gnorm2) < tol:
            converged = True
            it -= 1
            break
        step = min(step * 2.0, 1e6)
        while True:
            cand = params - step * grad
            cand_loss, cand_grad = _logreg_objective(cand, x, onehot, lam)
            if cand_loss <= loss - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-20:
                raise NumericError("line search failed to decrease the objective")
        params, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
    else:
        converged = bool(np.linalg.norm(grad) < tol)
    w = params[: n_feat * n_cls].reshape(n_feat, n_cls)
    b = params[n_feat * n_cls:]
    return LogRegModel(w, b, classes, lam, normalize, it, converged, history)


def logreg_predict_proba(model: LogRegModel, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if model.normalize:
        x = l2_normalize(x)
    return softmax(x @ model.coef + model.intercept, axis=1)


def logreg_predict(model: LogRegModel, features) -> np.ndarray:
    """Predicted labels; ties resolve to the lowest class index."""
    return model.classes[np.argmax(logreg_predict_proba(model, features), axis=1)]
