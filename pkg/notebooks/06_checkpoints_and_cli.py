"""
Checkpoints, configs and the command line
=========================================

Every artifact carries its configuration. Training twice with the same
seeds produces byte-identical checkpoints.
"""

# %%
import json
import tempfile
from pathlib import Path

from deepbdc import cli

work = Path(tempfile.mkdtemp())
small = ["data.n_classes=15", "data.split=[5,5,5]", "data.h=4", "data.w=4", "data.channels=8",
         "pooling.dim=8", "task.n_episodes=50", "train.epochs=1", "train.episodes_per_epoch=10"]
flags = [a for kv in small for a in ("--set", kv)]

# %%
for name in ("a", "b"):
    cli.main(["train", "--out", str(work / name), *flags])
same = (work / "a" / "checkpoint.bdcp").read_bytes() == (work / "b" / "checkpoint.bdcp").read_bytes()
print("identical checkpoints:", same)

# %%
cli.main(["eval", "--checkpoint", str(work / "a" / "checkpoint.bdcp"), "-o", str(work / "report.json")])
report = json.loads((work / "report.json").read_text())
print("accuracy", round(report["mean"], 3), "+-", round(report["ci95"], 3))
print("checkpoint digest", report["config"]["checkpoint_sha256"][:16], "...")

# %%
# Invalid settings are all reported at once, with exit code 2.
print("exit code:", cli.main(["eval", "--set", "head=unknown", "--set", "task.n_way=0"]))
