"""Central-difference checks for every primitive and for the toy model."""

from __future__ import annotations

import time
from typing import Callable, Dict

import numpy as np

from . import compressor
from . import tensor as T
from .model import ModelConfig, ProjectorConfig, ToyMLLM
from .task import SyntheticTask

TOLERANCE = 1e-6
STEP = 1e-5


def _weighted(fn: Callable, weights_seed: int):
    """Reduce an op's output to a scalar with fixed random weights."""

    def wrapped(**inputs):
        out = fn(**inputs)
        w = np.random.default_rng(weights_seed).uniform(-1.0, 1.0, size=out.shape)
        return {"out": (out * w).sum()}

    return wrapped


def primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (function of keyword Tensors, dict of input arrays)."""
    u = lambda *shape: rng.uniform(-2.0, 2.0, size=shape)
    causal = np.triu(np.ones((4, 4), dtype=bool), k=1)
    plan64 = compressor.plan_bins(6, 4)
    plan42 = compressor.plan_bins(4, 2)
    ids = rng.integers(0, 5, size=(2, 3))
    return {
        "add": (lambda a, b: a + b, {"a": u(3, 4), "b": u(4)}),
        "mul": (lambda a, b: a * b, {"a": u(3, 4), "b": u(3, 1)}),
        "matmul": (lambda a, b: a @ b, {"a": u(2, 3, 4), "b": u(4, 5)}),
        "softmax": (lambda x: T.softmax(x), {"x": u(3, 5)}),
        "softmax_masked": (lambda x: T.softmax(x, causal), {"x": u(2, 4, 4)}),
        "log_softmax": (lambda x: T.log_softmax(x), {"x": u(3, 5)}),
        "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), {"x": u(3, 6), "g": u(6), "b": u(6)}),
        "gelu": (lambda x: T.gelu(x), {"x": u(4, 5)}),
        "embedding": (lambda table: T.embedding(table, ids), {"table": u(5, 3)}),
        "reshape": (lambda x: x.reshape(6, 2) * x.reshape(6, 2), {"x": u(3, 4)}),
        "transpose": (lambda x: x.transpose(2, 0, 1) * x.transpose(2, 0, 1), {"x": u(2, 3, 4)}),
        "slice": (lambda x: x[1:, ::2] * x[1:, ::2], {"x": u(4, 5)}),
        "concat": (lambda a, b: T.concat([a, b], axis=1), {"a": u(2, 3), "b": u(2, 2)}),
        "sum": (lambda x: x.sum(axis=1) * x.sum(axis=1), {"x": u(3, 4)}),
        "mean": (lambda x: x.mean(axis=0) * x.mean(axis=0), {"x": u(3, 4)}),
        "avg_pool_6to4": (lambda x: compressor.adaptive_avg_pool(x, plan64), {"x": u(36, 3)}),
        "max_pool_4to2": (lambda x: compressor.adaptive_max_pool(x, plan42)[0], {"x": u(16, 3)}),
    }


def check_primitives(seed: int = 0, h: float = STEP) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    errors = {}
    for i, (name, (fn, inputs)) in enumerate(primitive_cases(rng).items()):
        record = T.Record(_weighted(fn, seed + 1000 + i), name=name)
        errors[name] = max(
            T.finite_diff_check(record, "out", key, h, inputs=inputs) for key in inputs
        )
    return errors


def default_model(seed: int = 0, kind: str = "avgpool", out_tokens: int = 4) -> ToyMLLM:
    return ToyMLLM(ModelConfig(projector=ProjectorConfig(kind, out_tokens), seed=seed))


def check_model(seed: int = 0, h: float = STEP, kind: str = "avgpool", out_tokens: int = 4) -> Dict[str, float]:
    """Loss w.r.t. one decoder weight matrix, and a logit w.r.t. a decoder attention tap."""
    model = default_model(seed, kind, out_tokens)
    task = SyntheticTask(model.config.patch_grid_side)
    rng = np.random.default_rng(seed + 7)
    images, captions = task.batch(rng, 2)
    inputs, targets = task.sequences(captions)

    loss_record = T.Record(lambda: {"loss": model.loss(images, inputs, targets)}, name="model-loss")
    errors = {
        "model_loss_wrt_decoder_wq": T.finite_diff_check(loss_record, "loss", model.params["decoder/b0.attn.wq"], h),
    }

    image = images[0]
    prefix = task.prompt_ids() + task.vocab.encode(captions[0])[:2]
    target = task.vocab.encode(captions[0])[2]
    position = model.config.n_visual + len(prefix) - 1

    def logit_fn():
        logits = model.forward(image[None], np.array(prefix)[None])
        return {"logit": logits[0, position, target]}

    logit_record = T.Record(logit_fn, name="model-logit")
    for tap_name in ("decoder/0/attn", "decoder/1/attn"):
        errors[f"logit_wrt_{tap_name}"] = T.finite_diff_check(logit_record, "logit", tap_name, h)
    return errors


def run_all(seed: int = 0, h: float = STEP) -> Dict[str, float]:
    errors = check_primitives(seed, h)
    errors.update(check_model(seed, h))
    return errors


def main_report(seed: int = 0, h: float = STEP, tolerance: float = TOLERANCE, out=print) -> bool:
    start = time.perf_counter()
    errors = run_all(seed, h)
    for name, err in errors.items():
        out(f"{name:32s} {err:.3e} {'ok' if err < tolerance else 'FAIL'}")
    worst = max(errors.values())
    out(f"max relative error {worst:.3e} (tolerance {tolerance:g}, {time.perf_counter() - start:.1f}s)")
    return worst < tolerance
