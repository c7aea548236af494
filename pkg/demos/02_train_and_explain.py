"""
Relevance maps for a trained toy captioner
==========================================

Train a tiny resampler pipeline on the grid-caption task, then ask which
patches each generated word relied on, and compare with raw attention.
"""

import sys
from pathlib import Path

import numpy as np

from rgaekit import render, rgae
from rgaekit.model import ModelConfig, ProjectorConfig, ToyMLLM
from rgaekit.task import SyntheticTask
from rgaekit.training import evaluate, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_explain")
out.mkdir(parents=True, exist_ok=True)

task = SyntheticTask(4)
model = ToyMLLM(ModelConfig(projector=ProjectorConfig("resampler", 4), seed=3))

# one-stage training: projector and decoder together, encoder frozen
result = train(model, task, stages=1, steps=300, lr=0.3)
print(f"loss {result.losses[0]:.3f} -> {result.losses[-1]:.3f}", evaluate(model, task))

image, caption = task.sample(np.random.default_rng(42))
print("caption:", caption)

# trace every word of the caption: attention maps and their gradients
record = model.generate(image, task.prompt_ids(), 16, text_ids=task.vocab.encode(caption))
ours = rgae.explain(record)
raw = rgae.raw_attention_baseline(record)


def show(name, values):
    grid = values.reshape(4, 4)
    print(name)
    for row in grid:
        print("  " + " ".join(f"{v:6.3f}" for v in row))


# the object sits at one cell; a good map puts its mass there
show("relevance, averaged over words", ours.text_to_patch)
show("raw attention baseline", raw.text_to_patch)
print("L1 distance between the two:", np.abs(ours.text_to_patch - raw.text_to_patch).sum())

# per word: the row and column tokens should point at the object
words = caption.split()
for step, word in zip(ours.steps, words):
    print(f"{word:>6s} -> strongest patch {int(step.text_to_patch.argmax())}")

render.render_patch_map(ours.text_to_patch, out / "relevance.ppm", base=image)
render.render_patch_map(raw.text_to_patch, out / "raw_attention.ppm", base=image)
render.render_query_grid(ours.query_to_patch, out / "queries")
print("images written to", out)
