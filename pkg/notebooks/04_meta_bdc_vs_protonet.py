"""
Second-order signal: BDC prototypes versus mean prototypes
==========================================================

Classes in this toy dataset share their channel means and differ only in
how channels co-vary. Mean-pooled prototypes see nothing, while BDC
prototypes separate the classes.
"""

# %%
from deepbdc import experiment, formats

base = {
    "data.n_classes": 30, "data.split": [10, 5, 15], "data.signal": "dependency_structure",
    "pooling.dim": 16, "task.n_episodes": 300, "train.epochs": 2,
    "train.episodes_per_epoch": 50, "train.val_episodes": 100,
}

# %%
for head, lr in (("bdc", 1e-5), ("protonet", 1e-2)):
    cfg = formats.build_config({**base, "head": head, "train.lr": lr})
    fresh = experiment.evaluate(cfg)
    trained = experiment.train(cfg)
    rep = experiment.evaluate(cfg, trained.state)
    print(f"{head:>9}: untrained {fresh.mean:.3f}, trained {rep.mean:.3f} +- {rep.ci95:.3f}"
          f" (val history {[round(v, 3) for v in trained.val_history]})")

# %%
# Other heads score the same episodes without training.
for head in ("covnet", "adm"):
    rep = experiment.evaluate(formats.build_config({**base, "head": head}))
    print(f"{head:>9}: {rep.mean:.3f} +- {rep.ci95:.3f}")
