"""
Episodic few-shot machinery: datasets, N-way K-shot sampling, synthetic
data, the episodic (meta) and whole-set (STL) training loops, and
evaluation with 95% confidence intervals.

Random streams
--------------
Every random draw comes from a Philox counter-based generator keyed by
``SeedSequence(seed, spawn_key=(crc32(purpose), *index))``. Purposes in use:
``"data"`` (synthetic generation), ``"init"`` (parameter init),
``"train"`` (episode ``i`` of epoch ``e`` -> index ``(e, i)``),
``"shuffle"`` (STL epoch order, index ``(e,)``), ``"val"`` and ``"eval"``
(episode ``i`` -> index ``(i,)``). A given episode therefore depends only
on ``(seed, purpose, index)``, never on thread count or call order.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import heads, kernel
from .errors import ConfigError, InvalidInputError, SamplingError, TrainingError
from .layer import (
    SGD,
    PoolingConfig,
    Projection,
    bdc_backward,
    bdc_forward,
    mean_pool_backward,
    mean_pool_forward,
    project,
    sgd_update,
)

HEADS = ("bdc", "protonet", "covnet", "adm")
PIPELINES = ("meta", "stl")
SIGNALS = ("mean_shift", "dependency_structure", "both")
THREADS_ENV = "DEEPBDC_THREADS"


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Independent reproducible generator for ``(seed, purpose, index)``."""
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Data


@dataclass
class Dataset:
    """Classes of feature maps; ``classes[c]`` has shape ``(items, h, w, C)``."""

    classes: list
    split: str = "meta_train"
    class_ids: list | None = None

    def __post_init__(self):
        self.classes = [np.asarray(c, dtype=np.float64) for c in self.classes]
        if not self.classes:
            raise InvalidInputError("dataset has no classes")
        shape = self.classes[0].shape[1:]
        for c in self.classes:
            if c.ndim != 4 or c.shape[0] < 1:
                raise InvalidInputError("every class needs at least one (h, w, C) item")
            if c.shape[1:] != shape:
                raise InvalidInputError("all items must share one feature-map shape")
        if self.class_ids is None:
            self.class_ids = list(range(len(self.classes)))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def map_shape(self) -> tuple:
        return self.classes[0].shape[1:]

    def flat(self):
        """All items stacked, with their class indices."""
        items = np.concatenate(self.classes, axis=0)
        labels = np.concatenate([np.full(len(c), k) for k, c in enumerate(self.classes)])
        return items, labels


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 20
    items_per_class: int = 30
    h: int = 8
    w: int = 8
    channels: int = 16
    class_signal: str = "dependency_structure"
    noise: float = 0.1
    signal_scale: float = 1.0
    anisotropy: float = 10.0


def _random_rotation(n, rng):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def make_synthetic_dataset(spec: SyntheticSpec, seed: int, split: str = "meta_train") -> Dataset:
    """Deterministic toy feature maps with a designed class signal.

    ``mean_shift``: class ``c`` has channel mean ``mu_c`` (standard normal
    times ``signal_scale``) at every position, plus ``noise``.

    ``dependency_structure``: every class draws positions from
    ``R_c @ diag(s) @ z`` with one fixed anisotropic scale profile ``s``
    (ratio ``anisotropy`` between largest and smallest) and a per-class
    random rotation ``R_c``. The source ``z`` is centered over the positions
    of each item, so class channel means agree up to the additive noise and
    only the channel dependence carries the label.

    ``both`` adds the two signals.
    """
    if spec.class_signal not in SIGNALS:
        raise ValueError(f"class_signal must be one of {SIGNALS}")
    dims = (spec.n_classes, spec.items_per_class, spec.h, spec.w, spec.channels)
    if min(dims) < 1:
        raise ValueError("all synthetic dimensions must be positive")
    if spec.noise < 0:
        raise ValueError("noise must be non-negative")
    rng = stream(seed, "data")
    n_pos = spec.h * spec.w
    c = spec.channels
    scales = np.geomspace(1.0, 1.0 / spec.anisotropy, c)
    scales *= np.sqrt(c / np.sum(scales**2)) * spec.signal_scale
    classes = []
    for _ in range(spec.n_classes):
        mu = rng.normal(size=c) * spec.signal_scale
        rot = _random_rotation(c, rng)
        items = np.empty((spec.items_per_class, n_pos, c))
        for i in range(spec.items_per_class):
            x = np.zeros((n_pos, c))
            if spec.class_signal in ("mean_shift", "both"):
                x += mu
            if spec.class_signal in ("dependency_structure", "both"):
                z = rng.normal(size=(n_pos, c))
                z -= z.mean(axis=0)
                x += (z * scales) @ rot.T
            if spec.noise > 0:
                x += spec.noise * rng.normal(size=(n_pos, c))
            items[i] = x
        classes.append(items.reshape(spec.items_per_class, spec.h, spec.w, c))
    return Dataset(classes, split)


def split_classes(ds: Dataset, n_train: int, n_val: int = 0, n_test: int = 0):
    """Partition classes in order into meta-train / meta-val / meta-test."""
    if n_train + n_val + n_test > ds.n_classes:
        raise SamplingError("not enough classes for the requested split")
    out = []
    start = 0
    for n, tag in ((n_train, "meta_train"), (n_val, "meta_val"), (n_test, "meta_test")):
        ids = list(range(start, start + n))
        out.append(Dataset([ds.classes[i] for i in ids], tag, [ds.class_ids[i] for i in ids]) if n else None)
        start += n
    return tuple(out)


# --------------------------------------------------------------------------
# Episodes


@dataclass(frozen=True)
class TaskConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    n_episodes: int = 2000
    seed: int = 0

    def validate(self, ds: Dataset | None = None):
        problems = []
        for name in ("n_way", "k_shot", "n_query", "n_episodes"):
            if getattr(self, name) < 1:
                problems.append(f"task.{name} must be positive")
        if ds is not None and not problems:
            if ds.n_classes < self.n_way:
                problems.append(f"dataset has {ds.n_classes} classes, n_way={self.n_way}")
            short = min(len(c) for c in ds.classes)
            if short < self.k_shot + self.n_query:
                problems.append(
                    f"smallest class has {short} items, need k_shot+n_query={self.k_shot + self.n_query}"
                )
        return problems


@dataclass
class Episode:
    support: np.ndarray  # (N*K, h, w, C), grouped by label
    support_labels: np.ndarray
    query: np.ndarray  # (N*Q, h, w, C)
    query_labels: np.ndarray
    classes: np.ndarray  # dataset class index of each episode label
    support_items: np.ndarray  # (N, K) item indices within each class
    query_items: np.ndarray  # (N, Q)


def sample_episode(ds: Dataset, cfg: TaskConfig, rng: np.random.Generator) -> Episode:
    """Draw ``N`` classes, then ``K + Q`` distinct items per class."""
    problems = cfg.validate(ds)
    if problems:
        raise SamplingError("; ".join(problems))
    n, k, q = cfg.n_way, cfg.k_shot, cfg.n_query
    classes = rng.choice(ds.n_classes, size=n, replace=False)
    s_items = np.empty((n, k), dtype=int)
    q_items = np.empty((n, q), dtype=int)
    for j, c in enumerate(classes):
        idx = rng.choice(len(ds.classes[c]), size=k + q, replace=False)
        s_items[j], q_items[j] = idx[:k], idx[k:]
    support = np.stack([ds.classes[c][i] for j, c in enumerate(classes) for i in s_items[j]])
    query = np.stack([ds.classes[c][i] for j, c in enumerate(classes) for i in q_items[j]])
    return Episode(
        support,
        np.repeat(np.arange(n), k),
        query,
        np.repeat(np.arange(n), q),
        classes,
        s_items,
        q_items,
    )


# --------------------------------------------------------------------------
# Model


@dataclass
class ModelState:
    projection: Projection
    pooling: PoolingConfig
    tau: float = 1.0
    classifier: heads.ClassifierWeights | None = None

    def params(self) -> dict:
        p = {"weight": self.projection.weight, "tau": np.array(self.tau)}
        if self.projection.bias is not None:
            p["bias"] = self.projection.bias
        if self.classifier is not None:
            p["classifier"] = self.classifier.weights
            p["classifier_tau"] = np.array(self.classifier.tau)
        return p

    def set_params(self, p: dict):
        self.projection.weight = p["weight"]
        self.tau = float(p["tau"])
        if "bias" in p:
            self.projection.bias = p["bias"]
        if self.classifier is not None:
            self.classifier.weights = p["classifier"]
            self.classifier.tau = float(p["classifier_tau"])

    def copy(self) -> "ModelState":
        clf = None
        if self.classifier is not None:
            clf = heads.ClassifierWeights(self.classifier.weights.copy(), self.classifier.tau)
        return ModelState(self.projection.copy(), self.pooling, self.tau, clf)

    def bdc_size(self, map_shape) -> int:
        if self.pooling.observation_axis == "channels":
            return self.pooling.reduced_dim
        return map_shape[0] * map_shape[1]


def init_model(in_channels: int, pooling: PoolingConfig, seed: int, n_classes: int | None = None,
               map_shape=None, tau: float = 1.0, bias: bool = True) -> ModelState:
    """Fresh parameters from the ``"init"`` stream.

    ``n_classes`` adds an STL classifier; for the spatial axis its size
    depends on ``map_shape``.
    """
    rng = stream(seed, "init")
    proj = Projection.init(in_channels, pooling.reduced_dim, rng, bias=bias)
    model = ModelState(proj, pooling, tau)
    if n_classes is not None:
        m = pooling.reduced_dim
        if pooling.observation_axis == "spatial":
            if map_shape is None:
                raise ValueError("map_shape is required for a spatial-axis classifier")
            m = map_shape[0] * map_shape[1]
        model.classifier = heads.ClassifierWeights.init(n_classes, m, rng, tau)
    return model


def _features(model: ModelState, fm):
    return project(fm, model.projection)


def represent(model: ModelState, fm, head: str = "bdc"):
    """Forward representation of one feature map and its backward cache."""
    if head == "bdc":
        return bdc_forward(fm, model.projection, model.pooling)
    if head == "protonet":
        return mean_pool_forward(fm, model.projection)
    raise ValueError(f"head {head!r} has no trainable representation")


def _backward(model, head, grad, cache):
    if head == "bdc":
        return bdc_backward(grad, cache, model.projection)[1]
    return mean_pool_backward(grad, cache, model.projection)[1]


# --------------------------------------------------------------------------
# Training


@dataclass
class Hyper:
    lr: float = 1e-3
    milestones: tuple = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    episodes_per_epoch: int = 100
    batch_size: int = 64
    val_episodes: int = 200
    similarity: str = "inner_product"

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class TrainResult:
    state: ModelState
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    best_epoch: int | None = None


def _sgd_step(opt: SGD, model: ModelState, grads: dict, lr: float):
    # parameters without a gradient (e.g. a pretrained classifier during meta training) stay fixed
    params = {k: v for k, v in model.params().items() if k in grads}
    # temperatures are never weight-decayed
    decayed = {k: v for k, v in params.items() if "tau" not in k}
    taus = {k: v for k, v in params.items() if "tau" in k}
    new = sgd_update(decayed, grads, lr, opt.momentum, opt.weight_decay, opt.velocity)
    new.update(sgd_update(taus, grads, lr, opt.momentum, 0.0, opt.velocity))
    model.set_params({**model.params(), **new})


def meta_episode_loss(model: ModelState, ep: Episode, head: str = "bdc",
                      similarity: str = "inner_product", need_grad: bool = True):
    """Loss of one episode and, optionally, gradients of all parameters.

    Prototypes are per-class averages of support representations.
    """
    n_way = int(ep.support_labels.max()) + 1
    s_out = [represent(model, fm, head) for fm in ep.support]
    q_out = [represent(model, fm, head) for fm in ep.query]
    s_reps = np.stack([r for r, _ in s_out])
    q_reps = np.stack([r for r, _ in q_out])
    protos = np.stack([s_reps[ep.support_labels == k].mean(axis=0) for k in range(n_way)])
    res = heads.meta_loss(q_reps, ep.query_labels, protos, model.tau, similarity)
    if not need_grad:
        return res.loss, None
    g_w = np.zeros_like(model.projection.weight)
    g_b = None if model.projection.bias is None else np.zeros_like(model.projection.bias)
    shots = np.bincount(ep.support_labels, minlength=n_way)
    pairs = [(res.grad_queries[i], q_out[i][1]) for i in range(len(q_out))]
    pairs += [
        (res.grad_prototypes[lab] / shots[lab], s_out[i][1])
        for i, lab in enumerate(ep.support_labels)
    ]
    for grad, cache in pairs:
        gp = _backward(model, head, grad, cache)
        g_w += gp.weight
        if g_b is not None:
            g_b += gp.bias
    grads = {"weight": g_w, "tau": np.array(res.grad_tau)}
    if g_b is not None:
        grads["bias"] = g_b
    return res.loss, grads


def train_meta(ds: Dataset, task: TaskConfig, model: ModelState, hyper: Hyper,
               head: str = "bdc", val_ds: Dataset | None = None,
               val_task: TaskConfig | None = None) -> TrainResult:
    """Episodic SGD on the softmax-over-prototypes loss.

    With ``val_ds`` the state with the best validation accuracy (checked
    after every epoch on ``hyper.val_episodes`` episodes) is returned.
    """
    if head not in ("bdc", "protonet"):
        raise ConfigError(f"meta training supports heads 'bdc' and 'protonet', not {head!r}")
    problems = task.validate(ds)
    if problems:
        raise SamplingError("; ".join(problems))
    model = model.copy()
    opt = SGD(hyper.momentum, hyper.weight_decay)
    result = TrainResult(model)
    best_acc = -1.0
    best_state = model.copy()
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        for i in range(hyper.episodes_per_epoch):
            ep = sample_episode(ds, task, stream(task.seed, "train", epoch, i))
            last_good = model.copy()
            loss, grads = meta_episode_loss(model, ep, head, hyper.similarity)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, episode {i}", state=last_good
                )
            try:
                _sgd_step(opt, model, grads, lr)
            except TrainingError as exc:
                exc.state = last_good
                raise
            result.loss_history.append(loss)
        if val_ds is not None:
            vt = val_task or TaskConfig(task.n_way, task.k_shot, task.n_query,
                                        hyper.val_episodes, task.seed)
            vt = TaskConfig(vt.n_way, vt.k_shot, vt.n_query, hyper.val_episodes, vt.seed)
            rep = evaluate(val_ds, vt, model, "meta", head, similarity=hyper.similarity,
                           purpose="val")
            result.val_history.append(rep.mean)
            if rep.mean > best_acc:
                best_acc = rep.mean
                best_state = model.copy()
                result.best_epoch = epoch
    result.state = best_state if val_ds is not None else model
    return result


def stl_batch_loss(model: ModelState, items, labels, need_grad: bool = True):
    """Cross-entropy of the BDC-vector classifier on one mini-batch."""
    outs = [bdc_forward(fm, model.projection, model.pooling) for fm in items]
    reps = np.stack([kernel.vectorize(a) for a, _ in outs])
    loss, logits, g_reps, g_w, g_tau = heads.stl_loss(reps, labels, model.classifier)
    correct = int(np.sum(np.argmax(logits, axis=1) == labels))
    if not need_grad:
        return loss, correct, None
    gw = np.zeros_like(model.projection.weight)
    gb = None if model.projection.bias is None else np.zeros_like(model.projection.bias)
    for g, (_, cache) in zip(g_reps, outs):
        gp = bdc_backward(kernel.unvectorize(g), cache, model.projection)[1]
        gw += gp.weight
        if gb is not None:
            gb += gp.bias
    grads = {
        "weight": gw,
        "tau": np.array(0.0),
        "classifier": g_w,
        "classifier_tau": np.array(g_tau),
    }
    if gb is not None:
        grads["bias"] = gb
    return loss, correct, grads


def train_stl(ds: Dataset, model: ModelState, hyper: Hyper, seed: int = 0) -> TrainResult:
    """Whole-set mini-batch SGD over every class of ``ds``."""
    if ds.n_classes < 2:
        raise InvalidInputError("STL training needs at least two classes")
    if model.classifier is None or model.classifier.weights.shape[0] != ds.n_classes:
        raise ConfigError("model classifier must have one weight matrix per dataset class")
    model = model.copy()
    opt = SGD(hyper.momentum, hyper.weight_decay)
    items, labels = ds.flat()
    result = TrainResult(model)
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        order = stream(seed, "shuffle", epoch).permutation(len(items))
        correct = 0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            last_good = model.copy()
            loss, c, grads = stl_batch_loss(model, items[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", state=last_good)
            try:
                _sgd_step(opt, model, grads, lr)
            except TrainingError as exc:
                exc.state = last_good
                raise
            correct += c
            result.loss_history.append(loss)
        result.train_accuracy.append(correct / len(items))
    result.state = model
    return result


def stl_accuracy(model: ModelState, ds: Dataset) -> float:
    """Training-set accuracy of the STL classifier with fixed parameters."""
    items, labels = ds.flat()
    correct = 0
    for start in range(0, len(items), 256):
        _, c, _ = stl_batch_loss(model, items[start:start + 256], labels[start:start + 256], False)
        correct += c
    return correct / len(items)


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    mean: float
    ci95: float
    n_episodes: int
    accuracies: list
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def confidence_interval(accs) -> tuple[float, float]:
    """Mean and ``1.96 * std / sqrt(E)`` half-width (sample std, ddof=1)."""
    accs = np.asarray(accs, dtype=np.float64)
    e = len(accs)
    mean = float(np.sum(accs) / e)
    if e < 2:
        return mean, 0.0
    std = float(np.sqrt(np.sum((accs - mean) ** 2) / (e - 1)))
    return mean, 1.96 * std / np.sqrt(e)


def _group(feats, labels, n_way):
    return [[f for f, l in zip(feats, labels) if l == k] for k in range(n_way)]


def episode_scores(model: ModelState, ep: Episode, pipeline: str = "meta", head: str = "bdc",
                   similarity: str = "inner_product", prototype_mode: str = "avg_bdc",
                   logreg_lam: float = 1.0) -> np.ndarray:
    """``(N*Q, N)`` class scores for the queries of one episode."""
    n_way = int(ep.support_labels.max()) + 1
    if pipeline == "stl":
        s = [kernel.vectorize(bdc_forward(fm, model.projection, model.pooling)[0]) for fm in ep.support]
        q = [kernel.vectorize(bdc_forward(fm, model.projection, model.pooling)[0]) for fm in ep.query]
        clf = heads.logreg_fit(np.stack(s), ep.support_labels, lam=logreg_lam)
        return heads.logreg_predict_proba(clf, np.stack(q))
    if head == "bdc":
        s_out = [bdc_forward(fm, model.projection, model.pooling) for fm in ep.support]
        q_reps = np.stack([bdc_forward(fm, model.projection, model.pooling)[0] for fm in ep.query])
        protos = []
        for k in range(n_way):
            idx = np.flatnonzero(ep.support_labels == k)
            protos.append(heads.prototype_bdc(
                [s_out[i][0] for i in idx], prototype_mode,
                [s_out[i][1].observations for i in idx],
            ).data)
        return heads.similarity_matrix(q_reps, np.stack(protos), similarity)
    s_feats = [_features(model, fm) for fm in ep.support]
    q_feats = [_features(model, fm) for fm in ep.query]
    support = _group(s_feats, ep.support_labels, n_way)
    if head == "protonet":
        kind = similarity if similarity in ("neg_sq_euclidean", "cosine") else "neg_sq_euclidean"
        return heads.protonet_head(support, q_feats, kind)
    if head == "covnet":
        return heads.covnet_head(support, q_feats)
    if head == "adm":
        return -heads.adm_head(support, q_feats)
    raise ValueError(f"unknown head {head!r}")


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


def evaluate(ds: Dataset, task: TaskConfig, model: ModelState, pipeline: str = "meta",
             head: str = "bdc", similarity: str = "inner_product",
             prototype_mode: str = "avg_bdc", threads: int | None = None,
             purpose: str = "eval", logreg_lam: float = 1.0) -> EvalReport:
    """Mean query accuracy over ``task.n_episodes`` episodes with a 95% CI.

    Episodes are independent streams, so the report does not depend on the
    number of worker threads.
    """
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}")
    if head not in HEADS:
        raise ConfigError(f"head must be one of {HEADS}")
    problems = task.validate(ds)
    if problems:
        raise SamplingError("; ".join(problems))

    def run(i):
        ep = sample_episode(ds, task, stream(task.seed, purpose, i))
        scores = episode_scores(model, ep, pipeline, head, similarity, prototype_mode, logreg_lam)
        return float(np.mean(np.argmax(scores, axis=1) == ep.query_labels))

    n_threads = resolve_threads(threads)
    if n_threads == 1:
        accs = [run(i) for i in range(task.n_episodes)]
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            accs = list(pool.map(run, range(task.n_episodes)))
    mean, ci = confidence_interval(accs)
    config = {
        "pipeline": pipeline,
        "head": head,
        "similarity": similarity,
        "prototype_mode": prototype_mode,
        **{f"task.{k}": v for k, v in asdict(task).items()},
    }
    return EvalReport(mean, ci, task.n_episodes, accs, config)
