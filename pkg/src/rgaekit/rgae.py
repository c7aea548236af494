"""Gradient-weighted attention relevance for the toy pipeline.

Per layer, attention probabilities and their gradients combine into a
non-negative head-averaged map ``abar = mean_h(max(grad * attn, 0))``, and a
relevance matrix that starts as the identity is updated layer by layer with
``R <- R + abar @ R``.

For each generation step the decoder relevance row at the predicting
position, restricted to the visual columns, is the Text-to-Query map.  The
Query-to-Patch map comes from the projector: propagated through the
resampler's self- and cross-attention layers, or the structural operator of
a pooling or linear projector.  Text-to-Patch is their product, and maps are
averaged over steps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import compressor
from .model import GenerationRecord, ProjectorKind, StepTrace


class CrossRule(str, enum.Enum):
    SIMPLE = "simple"
    NORMALIZED = "normalized"


class TraceError(ValueError):
    """A generation record lacks an attention map or gradient the engine needs."""


@dataclass
class RelevanceState:
    domain: str
    R: np.ndarray
    layers_applied: int = 0

    @classmethod
    def identity(cls, domain: str, size: int) -> "RelevanceState":
        return cls(domain, np.eye(size))

    @property
    def size(self) -> int:
        return self.R.shape[0]


@dataclass
class StepMaps:
    t: int
    text_to_query: np.ndarray
    query_to_patch: np.ndarray
    text_to_patch: np.ndarray
    decoder_relevance: Optional[np.ndarray] = None


@dataclass
class RGaeResult:
    steps: List[StepMaps]
    text_to_query: np.ndarray
    query_to_patch: np.ndarray
    text_to_patch: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.steps)

    def to_tensors(self, prefix: str = "rgae") -> Dict[str, np.ndarray]:
        out = {
            f"{prefix}/text_to_query/map": self.text_to_query,
            f"{prefix}/query_to_patch/map": self.query_to_patch,
            f"{prefix}/text_to_patch/map": self.text_to_patch,
        }
        for s in self.steps:
            out[f"{prefix}/t{s.t}.text_to_query/map"] = s.text_to_query
            out[f"{prefix}/t{s.t}.text_to_patch/map"] = s.text_to_patch
        return out


def layer_relevance(attn, grad) -> np.ndarray:
    """Head mean of the positive part of ``grad * attn``; accepts ``(h, Tq, Tk)`` or ``(Tq, Tk)``."""
    attn = np.asarray(attn, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if attn.shape != grad.shape:
        raise ValueError(f"attention {attn.shape} and gradient {grad.shape} shapes differ")
    if attn.ndim == 2:
        attn, grad = attn[None], grad[None]
    if attn.ndim != 3:
        raise ValueError(f"expected (heads, Tq, Tk) attention, got {attn.shape}")
    return np.maximum(grad * attn, 0.0).mean(axis=0)


def propagate_self(state: RelevanceState, abar) -> RelevanceState:
    abar = np.asarray(abar, dtype=np.float64)
    if abar.shape != state.R.shape:
        raise ValueError(f"layer map {abar.shape} does not match {state.domain} domain of size {state.size}")
    return RelevanceState(state.domain, state.R + abar @ state.R, state.layers_applied + 1)


def rownorm(R) -> np.ndarray:
    """Divide rows by their sums; all-zero rows stay zero."""
    R = np.asarray(R, dtype=np.float64)
    sums = R.sum(axis=1, keepdims=True)
    return np.divide(R, sums, out=np.zeros_like(R), where=sums != 0)


def propagate_cross(self_state: RelevanceState, cross_R, abar_cross, rule: CrossRule = CrossRule.NORMALIZED) -> np.ndarray:
    """Update the query-to-patch relevance through one cross-attention layer.

    The frozen encoder contributes an identity patch-side relevance, so the
    simple rule adds the layer map directly; the normalized rule first mixes
    it through the row-normalized query self-relevance.
    """
    rule = CrossRule(rule)
    cross_R = np.asarray(cross_R, dtype=np.float64)
    abar_cross = np.asarray(abar_cross, dtype=np.float64)
    m = self_state.size
    if cross_R.shape != abar_cross.shape or cross_R.shape[0] != m:
        raise ValueError(
            f"cross shapes disagree: self {self_state.R.shape}, relevance {cross_R.shape}, layer {abar_cross.shape}"
        )
    if rule is CrossRule.SIMPLE:
        return cross_R + abar_cross
    return cross_R + rownorm(self_state.R) @ abar_cross


def _pair(step: StepTrace, name: str):
    if name not in step.attn:
        raise TraceError(f"step {step.t}: missing attention tap {name!r}")
    if name not in step.grad_attn:
        raise TraceError(f"step {step.t}: missing gradient for tap {name!r}")
    return step.attn[name], step.grad_attn[name]


def decoder_relevance(record: GenerationRecord, step: StepTrace) -> np.ndarray:
    """Mixed-domain relevance after all decoder layers of ``step``."""
    state = None
    for l in range(record.decoder_layers):
        attn, grad = _pair(step, f"decoder/{l}/attn")
        if state is None:
            state = RelevanceState.identity("mixed", attn.shape[-1])
        state = propagate_self(state, layer_relevance(attn, grad))
    if state is None:
        raise TraceError("record has no decoder layers")
    return state.R


def query_to_patch(record: GenerationRecord, step: StepTrace, rule: CrossRule = CrossRule.NORMALIZED) -> np.ndarray:
    kind = record.projector_kind
    M, N = record.n_visual, record.n_patches
    if kind is ProjectorKind.LINEAR:
        return compressor.structural_map_linear(N)
    if kind.pooling:
        plan = compressor.plan_bins(compressor.grid_of(N), compressor.grid_of(M))
        if kind is ProjectorKind.ADAPTIVE_AVG_POOL:
            return compressor.structural_map_avg(plan)
        if step.pool_argmax is None:
            raise TraceError(f"step {step.t}: max-pool projector without an argmax record")
        return compressor.structural_map_max(plan, step.pool_argmax)
    state = RelevanceState.identity("query", M)
    cross = np.zeros((M, N))
    for l in range(record.resampler_layers):
        attn, grad = _pair(step, f"projector/self{l}/attn")
        state = propagate_self(state, layer_relevance(attn, grad))
        attn, grad = _pair(step, f"projector/cross{l}/attn")
        cross = propagate_cross(state, cross, layer_relevance(attn, grad), rule)
    return cross


def explain_step(record: GenerationRecord, t: int, rule: CrossRule = CrossRule.NORMALIZED,
                 include_encoder: bool = False) -> StepMaps:
    if include_encoder:
        raise NotImplementedError("propagation through encoder layers is not supported")
    step = record.steps[t]
    R = decoder_relevance(record, step)
    t2q = R[step.position, : record.n_visual].copy()
    q2p = query_to_patch(record, step, rule)
    return StepMaps(t, t2q, q2p, t2q @ q2p, decoder_relevance=R)


def _average(steps: List[StepMaps], metadata) -> RGaeResult:
    return RGaeResult(
        steps=steps,
        text_to_query=np.mean([s.text_to_query for s in steps], axis=0),
        query_to_patch=np.mean([s.query_to_patch for s in steps], axis=0),
        text_to_patch=np.mean([s.text_to_patch for s in steps], axis=0),
        metadata=metadata,
    )


def explain(record: GenerationRecord, rule: CrossRule = CrossRule.NORMALIZED) -> RGaeResult:
    """Explain every step and average the maps uniformly over steps."""
    if record.length == 0:
        raise ValueError("cannot explain a generation with no steps")
    rule = CrossRule(rule)
    steps = [explain_step(record, t, rule) for t in range(record.length)]
    meta = {
        "method": "rgae",
        "rule": rule.value,
        "steps": record.length,
        "projector": record.projector_kind.value,
        "n_visual": record.n_visual,
        "n_patches": record.n_patches,
    }
    return _average(steps, meta)


def raw_attention_step(record: GenerationRecord, t: int) -> StepMaps:
    """Last-layer attention maps, head-averaged, composed like the relevance maps."""
    step = record.steps[t]
    attn, _ = _pair(step, f"decoder/{record.decoder_layers - 1}/attn")
    t2q = attn.mean(axis=0)[step.position, : record.n_visual].copy()
    if record.projector_kind is ProjectorKind.RESAMPLER:
        cross, _ = _pair(step, f"projector/cross{record.resampler_layers - 1}/attn")
        q2p = cross.mean(axis=0)
    else:
        q2p = query_to_patch(record, step)
    return StepMaps(t, t2q, q2p, t2q @ q2p)


def raw_attention_baseline(record: GenerationRecord, t: int | None = None):
    """Raw-attention maps for step ``t``, or averaged over all steps when ``t`` is None."""
    if t is not None:
        return raw_attention_step(record, t)
    if record.length == 0:
        raise ValueError("cannot explain a generation with no steps")
    steps = [raw_attention_step(record, i) for i in range(record.length)]
    return _average(steps, {"method": "raw-attn", "steps": record.length,
                            "projector": record.projector_kind.value})
