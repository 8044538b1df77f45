"""Config-driven orchestration shared by the command line and the demos."""
from __future__ import annotations

import numpy as np

from . import engine, formats
from .errors import ConfigError, InvalidInputError
from .layer import PoolingConfig


def load_datasets(cfg: dict):
    """``(meta_train, meta_val, meta_test)`` for a validated config."""
    if cfg["data.source"] == "synthetic":
        spec = engine.SyntheticSpec(
            n_classes=cfg["data.n_classes"],
            items_per_class=cfg["data.items_per_class"],
            h=cfg["data.h"],
            w=cfg["data.w"],
            channels=cfg["data.channels"],
            class_signal=cfg["data.signal"],
            noise=cfg["data.noise"],
            signal_scale=cfg["data.signal_scale"],
        )
        ds = engine.make_synthetic_dataset(spec, cfg["seed.data"])
    else:
        arr = formats.load_tensor(cfg["data.source"])
        if arr.ndim != 5:
            raise InvalidInputError(
                f"{cfg['data.source']}: expected a (classes, items, h, w, C) tensor, got rank {arr.ndim}"
            )
        ds = engine.Dataset(list(arr.astype(np.float64)))
    return engine.split_classes(ds, *cfg["data.split"])


def task_config(cfg: dict, seed_key: str = "seed.eval", n_episodes=None) -> engine.TaskConfig:
    return engine.TaskConfig(
        cfg["task.n_way"],
        cfg["task.k_shot"],
        cfg["task.n_query"],
        cfg["task.n_episodes"] if n_episodes is None else n_episodes,
        cfg[seed_key],
    )


def hyper(cfg: dict, stl: bool = False) -> engine.Hyper:
    return engine.Hyper(
        lr=cfg["train.stl_lr"] if stl else cfg["train.lr"],
        milestones=tuple(int(m) for m in cfg["train.milestones"]),
        gamma=cfg["train.gamma"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.pretrain_stl_epochs"] if stl and cfg["pipeline"] == "meta" else cfg["train.epochs"],
        episodes_per_epoch=cfg["train.episodes_per_epoch"],
        batch_size=cfg["train.batch_size"],
        val_episodes=cfg["train.val_episodes"],
        similarity=cfg["similarity"],
    )


def fresh_model(cfg: dict, train_ds) -> engine.ModelState:
    pooling = PoolingConfig(cfg["pooling.axis"], cfg["pooling.dim"])
    wants_clf = cfg["pipeline"] == "stl" or cfg["train.pretrain_stl_epochs"] > 0
    return engine.init_model(
        train_ds.map_shape[2],
        pooling,
        cfg["seed.init"],
        n_classes=train_ds.n_classes if wants_clf else None,
        map_shape=train_ds.map_shape,
        tau=cfg["train.tau_init"],
        bias=cfg["pooling.bias"],
    )


def train(cfg: dict) -> engine.TrainResult:
    """Train per ``cfg``; the STL stage runs first when requested."""
    train_ds, val_ds, _ = load_datasets(cfg)
    if train_ds is None:
        raise ConfigError("data.split: no training classes")
    if cfg["pipeline"] == "meta" and train_ds.n_classes < cfg["task.n_way"]:
        raise ConfigError("data.split: fewer training classes than task.n_way")
    model = fresh_model(cfg, train_ds)
    if cfg["pipeline"] == "stl":
        return engine.train_stl(train_ds, model, hyper(cfg, stl=True), seed=cfg["seed.train"])
    if cfg["train.pretrain_stl_epochs"] > 0:
        pre = engine.train_stl(train_ds, model, hyper(cfg, stl=True), seed=cfg["seed.train"])
        model = pre.state
    return engine.train_meta(
        train_ds,
        task_config(cfg, "seed.train", n_episodes=1),
        model,
        hyper(cfg),
        head=cfg["head"],
        val_ds=val_ds,
    )


def evaluate(cfg: dict, model=None, threads=None) -> engine.EvalReport:
    """Evaluate ``model`` (a fresh one when ``None``) on the meta-test split."""
    train_ds, _, test_ds = load_datasets(cfg)
    if test_ds is None:
        raise ConfigError("data.split: no meta-test classes")
    if model is None:
        model = fresh_model(cfg, train_ds if train_ds is not None else test_ds)
    return engine.evaluate(
        test_ds,
        task_config(cfg),
        model,
        pipeline=cfg["pipeline"],
        head=cfg["head"],
        similarity=cfg["similarity"],
        prototype_mode=cfg["prototype_mode"],
        threads=threads,
        logreg_lam=cfg["logreg.lam"],
    )
