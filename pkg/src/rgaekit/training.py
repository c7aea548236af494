"""Plain SGD training of the toy pipeline on the grid-captioning task.

The encoder stays frozen at its random initialization.  Two-stage training
first updates only the projector, then the projector and the decoder;
one-stage training goes straight to the second stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from .model import ProjectorKind, ToyMLLM
from .task import SyntheticTask

STAGE_MODULES = {1: ("projector",), 2: ("projector", "decoder")}


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    stages: List[int] = field(default_factory=list)

    def steps_to_threshold(self, threshold: float) -> int | None:
        """1-based index of the first step whose loss is at or below ``threshold``."""
        for i, loss in enumerate(self.losses):
            if loss <= threshold:
                return i + 1
        return None

    def to_rows(self):
        return [(i + 1, s, l) for i, (s, l) in enumerate(zip(self.stages, self.losses))]


def sgd_step(model: ToyMLLM, images, inputs, targets, lr: float) -> float:
    loss = model.loss(images, inputs, targets)
    loss.backward()
    for p in model.params.values():
        if p.requires_grad:
            p.data = p.data - lr * p.grad
    return float(loss.data)


def train(
    model: ToyMLLM,
    task: SyntheticTask,
    stages: int = 2,
    steps: int = 200,
    lr: float = 0.1,
    batch_size: int = 16,
    data_seed: int = 1,
    on_stage_end: Callable[[int, ToyMLLM], None] | None = None,
) -> TrainResult:
    """Train in place; ``steps`` is the per-stage step count.

    ``on_stage_end(stage, model)`` runs after each stage, e.g. to snapshot weights.
    """
    if stages not in (1, 2):
        raise ValueError("stages must be 1 or 2")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if task.side != model.config.patch_grid_side:
        raise ValueError("task grid side does not match the model")

    rng = np.random.default_rng(data_seed)
    schedule = [1, 2] if stages == 2 else [2]
    result = TrainResult()
    try:
        for stage in schedule:
            model.set_trainable(STAGE_MODULES[stage])
            for _ in range(steps):
                images, captions = task.batch(rng, batch_size)
                inputs, targets = task.sequences(captions)
                result.losses.append(sgd_step(model, images, inputs, targets, lr))
                result.stages.append(stage)
            if on_stage_end is not None:
                on_stage_end(stage, model)
    finally:
        model.set_trainable(("projector", "decoder"))
    return result


def evaluate(model: ToyMLLM, task: SyntheticTask, samples: int = 64, seed: int = 12345) -> dict:
    """Greedy-caption accuracy on fresh samples.

    ``exact`` counts fully correct captions; ``location`` counts samples
    whose predicted row and column are both right.
    """
    rng = np.random.default_rng(seed)
    images, captions = task.batch(rng, samples)
    _, targets = task.sequences(captions)
    length = targets.shape[1] - 1
    predicted = model.greedy_caption(images, task.prompt_ids(), length)
    truth = targets[:, :length]
    # caption layout: color at row R col C
    location = np.all(predicted[:, [3, 5]] == truth[:, [3, 5]], axis=1)
    return {
        "exact": float(np.mean(np.all(predicted == truth, axis=1))),
        "location": float(np.mean(location)),
        "color": float(np.mean(predicted[:, 0] == truth[:, 0])),
    }


def plateau_loss(task: SyntheticTask) -> float:
    """Mean per-token loss of a model that knows the caption template but not the image.

    Color, row and column are then uniform guesses; every other target token
    (including EOS) is free.
    """
    n_targets = 7  # "<color> at row r col c" plus EOS
    return (math.log(len(task.colors)) + 2 * math.log(task.side)) / n_targets


def convergence_study(task: SyntheticTask, kinds, seeds, steps: int, lr: float = 0.3, stages: int = 1,
                      out_tokens: int | None = None, batch_size: int = 16, data_seed: int = 1,
                      threshold: float | None = None) -> dict:
    """Train each projector kind over ``seeds`` with identical budgets and data.

    Returns ``{kind: {"curves": [...], "steps_to_threshold": [...]}}``; a run
    that never reaches the threshold counts as ``steps * stages + 1``.
    The default threshold is half of :func:`plateau_loss`.
    """
    from .model import ModelConfig, ProjectorConfig, ToyMLLM

    if threshold is None:
        threshold = 0.5 * plateau_loss(task)
    m = out_tokens or max(1, task.side // 2) ** 2
    out = {}
    for kind in kinds:
        curves, hits = [], []
        for seed in seeds:
            cfg = ModelConfig(patch_grid_side=task.side, projector=ProjectorConfig(kind, m), seed=seed)
            res = train(ToyMLLM(cfg), task, stages=stages, steps=steps, lr=lr,
                        batch_size=batch_size, data_seed=data_seed)
            curves.append(res.losses)
            hit = res.steps_to_threshold(threshold)
            hits.append(hit if hit is not None else steps * stages + 1)
        out[ProjectorKind(kind).value] = {"curves": curves, "steps_to_threshold": hits}
    out["threshold"] = threshold
    return out


__all__ = ["TrainResult", "train", "evaluate", "sgd_step", "plateau_loss", "convergence_study", "ProjectorKind"]
