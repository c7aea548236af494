"""
Pooling versus a learned resampler: how fast does the loss fall?
================================================================

Same data, same budget, several seeds.  Steps-to-threshold uses half
of the loss a model reaches when it knows the caption template but
guesses the image content.
"""

import csv
import sys
from pathlib import Path

import numpy as np

from rgaekit.model import ModelConfig, ProjectorConfig, ToyMLLM
from rgaekit.task import SyntheticTask
from rgaekit.training import convergence_study, plateau_loss, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_convergence")
out.mkdir(parents=True, exist_ok=True)
seeds = range(int(sys.argv[2]) if len(sys.argv) > 2 else 3)

task = SyntheticTask(4)
print(f"template plateau {plateau_loss(task):.4f}, threshold {0.5 * plateau_loss(task):.4f}")

study = convergence_study(task, ("avgpool", "resampler"), seeds, steps=500, lr=0.3)
for kind in ("avgpool", "resampler"):
    hits = study[kind]["steps_to_threshold"]
    print(f"{kind:10s} steps to threshold {hits} median {int(np.median(hits))}")

with open(out / "curves.csv", "w", newline="") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["projector", "seed", "step", "loss"])
    for kind in ("avgpool", "resampler"):
        for seed, curve in zip(seeds, study[kind]["curves"]):
            writer.writerows([kind, seed, i + 1, f"{v:.17g}"] for i, v in enumerate(curve))

# two-stage schedule: stage 1 touches only the projector
model = ToyMLLM(ModelConfig(projector=ProjectorConfig("avgpool", 4), seed=0))
before = {k: p.data.copy() for k, p in model.group("decoder").items()}


def check(stage, m):
    if stage == 1:
        same = all(np.array_equal(before[k], p.data) for k, p in m.group("decoder").items())
        print("decoder unchanged after stage 1:", same)


two = train(model, task, stages=2, steps=250, lr=0.3, on_stage_end=check)
print(f"two-stage final loss {two.losses[-1]:.3f}; curves in {out}")
