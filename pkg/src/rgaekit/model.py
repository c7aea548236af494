"""Miniature vision-language pipeline: patch encoder, projector, causal decoder.

Images are ``side x side x channels`` grids; each cell is one patch.  The
encoder is a small pre-LN transformer, the projector is one of four kinds
(two-layer GELU MLP, adaptive average or max pooling followed by that MLP,
or a learned-query resampler with self- and cross-attention), and the
decoder is a causal transformer that reads ``[visual tokens; prompt; prefix]``.

Every attention probability tensor is passed through :func:`tap`, so inside
a :class:`~rgaekit.tensor.Record` its value and gradient are captured under
names of the form ``encoder/<l>/attn``, ``projector/self<l>/attn``,
``projector/cross<l>/attn`` and ``decoder/<l>/attn``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import compressor
from .tensor import Record, Tensor, concat, embedding, gelu, getitem, layer_norm, log_softmax, softmax, tap
from .task import Vocab


class ProjectorKind(str, enum.Enum):
    LINEAR = "linear"
    ADAPTIVE_AVG_POOL = "avgpool"
    ADAPTIVE_MAX_POOL = "maxpool"
    RESAMPLER = "resampler"

    @property
    def pooling(self) -> bool:
        return self in (ProjectorKind.ADAPTIVE_AVG_POOL, ProjectorKind.ADAPTIVE_MAX_POOL)


@dataclass
class ProjectorConfig:
    kind: ProjectorKind = ProjectorKind.ADAPTIVE_AVG_POOL
    out_tokens: int = 4
    resampler_layers: int = 2

    def __post_init__(self):
        self.kind = ProjectorKind(self.kind)

    def validate(self, n_patches: int):
        if self.out_tokens < 1:
            raise ValueError("projector out_tokens must be positive")
        if self.kind is ProjectorKind.LINEAR and self.out_tokens != n_patches:
            raise ValueError(f"linear projector keeps the token count: out_tokens must be {n_patches}")
        if self.kind.pooling:
            side = math.isqrt(self.out_tokens)
            if side * side != self.out_tokens:
                raise ValueError(f"pooling projector needs a square token count, got {self.out_tokens}")
            if self.out_tokens > n_patches:
                raise ValueError(f"pooling cannot upsample {n_patches} patches to {self.out_tokens} tokens")
        if self.kind is ProjectorKind.RESAMPLER and self.resampler_layers < 1:
            raise ValueError("resampler needs at least one layer")


@dataclass
class ModelConfig:
    patch_grid_side: int = 4
    embed_dim_vision: int = 32
    embed_dim_text: int = 32
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = len(Vocab.default())
    channels: int = 3
    max_text_len: int = 16
    mlp_ratio: int = 2
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.projector, dict):
            self.projector = ProjectorConfig(**self.projector)

    @property
    def n_patches(self) -> int:
        return self.patch_grid_side**2

    @property
    def n_visual(self) -> int:
        return self.projector.out_tokens

    def validate(self):
        if self.patch_grid_side < 1:
            raise ValueError("patch_grid_side must be positive")
        for name in ("embed_dim_vision", "embed_dim_text"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        if self.vocab_size < 3:
            raise ValueError("vocabulary must hold the PAD/BOS/EOS ids")
        self.projector.validate(self.n_patches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projector"]["kind"] = self.projector.kind.value
        return d


@dataclass
class StepTrace:
    """Everything captured for one explained generation step."""

    t: int
    target_id: int
    position: int
    logits: np.ndarray
    attn: Dict[str, np.ndarray]
    grad_attn: Dict[str, np.ndarray]
    pool_argmax: Optional[np.ndarray] = None


@dataclass
class GenerationRecord:
    prompt_ids: List[int]
    generated_ids: List[int]
    steps: List[StepTrace]
    n_patches: int
    n_visual: int
    projector_kind: ProjectorKind
    decoder_layers: int
    resampler_layers: int = 0
    mode: str = "teacher"

    @property
    def length(self) -> int:
        return len(self.steps)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        """Flatten into trace-container records."""
        kinds = list(ProjectorKind)
        out = {
            "generation/prompt/map": np.array(self.prompt_ids, dtype=np.float64),
            "generation/targets/map": np.array(self.generated_ids, dtype=np.float64),
            "generation/positions/map": np.array([s.position for s in self.steps], dtype=np.float64),
            "generation/info/map": np.array(
                [self.n_patches, self.n_visual, kinds.index(self.projector_kind), self.decoder_layers,
                 self.resampler_layers, 1.0 if self.mode == "greedy" else 0.0],
                dtype=np.float64,
            ),
        }
        for s in self.steps:
            out[f"generation/t{s.t}.logits/map"] = s.logits
            for name, a in s.attn.items():
                module, layer, _ = name.split("/")
                out[f"{module}/t{s.t}.{layer}/attn"] = a
                out[f"{module}/t{s.t}.{layer}/grad_attn"] = s.grad_attn[name]
            if s.pool_argmax is not None:
                out[f"projector/t{s.t}.argmax/map"] = s.pool_argmax.astype(np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "GenerationRecord":
        info = tensors["generation/info/map"]
        targets = [int(v) for v in tensors["generation/targets/map"]]
        positions = [int(v) for v in tensors["generation/positions/map"]]
        steps = []
        for t, (target, position) in enumerate(zip(targets, positions)):
            attn, grads = {}, {}
            prefix = f"t{t}."
            for name, value in tensors.items():
                module, layer, kind = name.split("/")
                if not layer.startswith(prefix) or kind not in ("attn", "grad_attn"):
                    continue
                key = f"{module}/{layer[len(prefix):]}/attn"
                (attn if kind == "attn" else grads)[key] = value
            argmax = tensors.get(f"projector/t{t}.argmax/map")
            steps.append(
                StepTrace(
                    t=t,
                    target_id=target,
                    position=position,
                    logits=tensors[f"generation/t{t}.logits/map"],
                    attn=attn,
                    grad_attn=grads,
                    pool_argmax=None if argmax is None else argmax.astype(np.int64),
                )
            )
        return cls(
            prompt_ids=[int(v) for v in tensors["generation/prompt/map"]],
            generated_ids=targets,
            steps=steps,
            n_patches=int(info[0]),
            n_visual=int(info[1]),
            projector_kind=list(ProjectorKind)[int(info[2])],
            decoder_layers=int(info[3]),
            resampler_layers=int(info[4]),
            mode="greedy" if info[5] else "teacher",
        )


class ToyMLLM:
    """The three-module pipeline with parameters held as leaf Tensors.

    ``params`` maps ``"<module>/<name>"`` to a Tensor; ``<module>`` is one
    of ``encoder``, ``projector`` or ``decoder``.
    """

    def __init__(self, config: ModelConfig, init: str = "normal"):
        config.validate()
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.last_pool_argmax: Optional[np.ndarray] = None
        side = config.patch_grid_side
        if config.projector.kind.pooling:
            self.pool_plan = compressor.plan_bins(side, compressor.grid_of(config.n_visual))
        else:
            self.pool_plan = None
        self._build(np.random.default_rng(config.seed), init)

    # -- parameters --------------------------------------------------------
    def _add(self, name, shape, rng, init, scale=None, fill=None):
        if fill is not None:
            value = np.full(shape, fill, dtype=np.float64)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            if scale is None:
                scale = 1.0 / math.sqrt(shape[0])
            value = rng.normal(0.0, scale, size=shape)
        self.params[name] = Tensor(value, requires_grad=True)

    def _add_block(self, prefix, d, rng, init, cross_dim=None):
        hidden = self.config.mlp_ratio * d
        for ln in ("ln1", "ln2"):
            self._add(f"{prefix}.{ln}.g", (d,), rng, init, fill=1.0)
            self._add(f"{prefix}.{ln}.b", (d,), rng, init, fill=0.0)
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.attn.{w}", (d, d), rng, init)
        if cross_dim is not None:
            for ln in ("lnq", "lnkv"):
                dim = d if ln == "lnq" else cross_dim
                self._add(f"{prefix}.{ln}.g", (dim,), rng, init, fill=1.0)
                self._add(f"{prefix}.{ln}.b", (dim,), rng, init, fill=0.0)
            self._add(f"{prefix}.cross.wq", (d, d), rng, init)
            self._add(f"{prefix}.cross.wk", (cross_dim, d), rng, init)
            self._add(f"{prefix}.cross.wv", (cross_dim, d), rng, init)
            self._add(f"{prefix}.cross.wo", (d, d), rng, init)
        self._add(f"{prefix}.mlp.w1", (d, hidden), rng, init)
        self._add(f"{prefix}.mlp.b1", (hidden,), rng, init, fill=0.0)
        self._add(f"{prefix}.mlp.w2", (hidden, d), rng, init)
        self._add(f"{prefix}.mlp.b2", (d,), rng, init, fill=0.0)

    def _build(self, rng, init):
        c = self.config
        dI, dT = c.embed_dim_vision, c.embed_dim_text
        self._add("encoder/patch.w", (c.channels, dI), rng, init, scale=1.0)
        self._add("encoder/patch.b", (dI,), rng, init, fill=0.0)
        self._add("encoder/pos", (c.n_patches, dI), rng, init, scale=1.0)
        for l in range(c.encoder_layers):
            self._add_block(f"encoder/b{l}", dI, rng, init)
        self._add("encoder/ln.g", (dI,), rng, init, fill=1.0)
        self._add("encoder/ln.b", (dI,), rng, init, fill=0.0)

        kind = c.projector.kind
        if kind is ProjectorKind.RESAMPLER:
            self._add("projector/queries", (c.n_visual, dT), rng, init, scale=1.0)
            for l in range(c.projector.resampler_layers):
                self._add_block(f"projector/b{l}", dT, rng, init, cross_dim=dI)
        else:
            self._add("projector/w1", (dI, dT), rng, init)
            self._add("projector/b1", (dT,), rng, init, fill=0.0)
            self._add("projector/w2", (dT, dT), rng, init)
            self._add("projector/b2", (dT,), rng, init, fill=0.0)

        self._add("decoder/tok", (c.vocab_size, dT), rng, init, scale=1.0)
        self._add("decoder/pos", (c.n_visual + c.max_text_len, dT), rng, init, scale=0.5)
        for l in range(c.decoder_layers):
            self._add_block(f"decoder/b{l}", dT, rng, init)
        self._add("decoder/ln.g", (dT,), rng, init, fill=1.0)
        self._add("decoder/ln.b", (dT,), rng, init, fill=0.0)
        self._add("decoder/head.w", (dT, c.vocab_size), rng, init)
        self._add("decoder/head.b", (c.vocab_size,), rng, init, fill=0.0)

    def group(self, module: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(module + "/")}

    def set_trainable(self, modules: Sequence[str]):
        for name, p in self.params.items():
            p.requires_grad = name.split("/")[0] in modules

    # -- building blocks ---------------------------------------------------
    def _ln(self, x, prefix):
        return layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _attention(self, prefix, xq, xkv, name, mask=None):
        p = self.params
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        h = self.config.heads
        dh = d // h
        q = (xq @ p[prefix + ".wq"]).reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
        k = (xkv @ p[prefix + ".wk"]).reshape(B, Tk, h, dh).transpose(0, 2, 3, 1)
        v = (xkv @ p[prefix + ".wv"]).reshape(B, Tk, h, dh).transpose(0, 2, 1, 3)
        probs = softmax((q @ k) * (1.0 / math.sqrt(dh)), mask)
        probs = tap(name, probs)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return out @ p[prefix + ".wo"]

    def _mlp(self, x, prefix):
        p = self.params
        hidden = gelu(x @ p[prefix + ".w1"] + p[prefix + ".b1"])
        return hidden @ p[prefix + ".w2"] + p[prefix + ".b2"]

    def _block(self, x, prefix, name, mask=None):
        h = self._ln(x, prefix + ".ln1")
        x = x + self._attention(prefix + ".attn", h, h, name, mask)
        return x + self._mlp(self._ln(x, prefix + ".ln2"), prefix + ".mlp")

    # -- the three modules -------------------------------------------------
    def _encode(self, images: np.ndarray) -> Tensor:
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.patch_grid_side, c.patch_grid_side, c.channels):
            raise ValueError(
                f"image must be a {c.patch_grid_side}x{c.patch_grid_side}x{c.channels} grid, "
                f"got shape {images.shape[1:]}"
            )
        B = images.shape[0]
        p = self.params
        x = Tensor(images.reshape(B, c.n_patches, c.channels)) @ p["encoder/patch.w"] + p["encoder/patch.b"]
        x = x + p["encoder/pos"]
        for l in range(c.encoder_layers):
            x = self._block(x, f"encoder/b{l}", f"encoder/{l}/attn")
        return self._ln(x, "encoder/ln")

    def _project(self, patches: Tensor) -> Tensor:
        c = self.config
        kind = c.projector.kind
        p = self.params
        if kind is ProjectorKind.RESAMPLER:
            B = patches.shape[0]
            x = Tensor(np.zeros((B, c.n_visual, c.embed_dim_text))) + p["projector/queries"]
            for l in range(c.projector.resampler_layers):
                pre = f"projector/b{l}"
                x = self._block_resampler(x, patches, pre, l)
            return x
        if kind is ProjectorKind.ADAPTIVE_AVG_POOL:
            patches = compressor.adaptive_avg_pool(patches, self.pool_plan)
        elif kind is ProjectorKind.ADAPTIVE_MAX_POOL:
            patches, self.last_pool_argmax = compressor.adaptive_max_pool(patches, self.pool_plan)
        hidden = gelu(patches @ p["projector/w1"] + p["projector/b1"])
        return hidden @ p["projector/w2"] + p["projector/b2"]

    def _block_resampler(self, x, patches, pre, l):
        h = self._ln(x, pre + ".ln1")
        x = x + self._attention(pre + ".attn", h, h, f"projector/self{l}/attn")
        kv = self._ln(patches, pre + ".lnkv")
        x = x + self._attention(pre + ".cross", self._ln(x, pre + ".lnq"), kv, f"projector/cross{l}/attn")
        return x + self._mlp(self._ln(x, pre + ".ln2"), pre + ".mlp")

    def _decode(self, visual: Tensor, ids: np.ndarray) -> Tensor:
        c = self.config
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ValueError(f"token ids must lie in [0, {c.vocab_size})")
        if ids.shape[1] > c.max_text_len:
            raise ValueError(f"text of {ids.shape[1]} tokens exceeds max_text_len={c.max_text_len}")
        p = self.params
        x = concat([visual, embedding(p["decoder/tok"], ids)], axis=1)
        S = x.shape[1]
        x = x + getitem(p["decoder/pos"], slice(0, S))
        causal = np.triu(np.ones((S, S), dtype=bool), k=1)
        for l in range(c.decoder_layers):
            x = self._block(x, f"decoder/b{l}", f"decoder/{l}/attn", mask=causal)
        x = self._ln(x, "decoder/ln")
        return x @ p["decoder/head.w"] + p["decoder/head.b"]

    # -- public API --------------------------------------------------------
    def encode(self, image) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        single = image.ndim == 3
        out = self._encode(image[None] if single else image)
        return out.reshape(out.shape[1:]) if single else out

    def project(self, patches: Tensor) -> Tensor:
        c = self.config
        single = patches.ndim == 2
        if patches.shape[-2:] != (c.n_patches, c.embed_dim_vision):
            raise ValueError(f"patches must have shape ({c.n_patches}, {c.embed_dim_vision}), got {patches.shape}")
        out = self._project(patches.reshape(1, *patches.shape) if single else patches)
        if single and self.last_pool_argmax is not None and c.projector.kind is ProjectorKind.ADAPTIVE_MAX_POOL:
            self.last_pool_argmax = self.last_pool_argmax[0]
        return out.reshape(out.shape[1:]) if single else out

    def forward(self, images, ids) -> Tensor:
        """Logits of shape ``(B, M + T, vocab)`` for images ``(B, s, s, C)`` and ids ``(B, T)``."""
        images = np.asarray(images, dtype=np.float64)
        return self._decode(self._project(self._encode(images)), np.asarray(ids))

    def loss(self, images, inputs, targets) -> Tensor:
        """Mean teacher-forced cross-entropy; targets align to the last prompt position on."""
        logits = self.forward(images, inputs)
        B, S, _ = logits.shape
        n_targets = targets.shape[1]
        positions = np.arange(S - n_targets, S)
        logp = log_softmax(logits)
        picked = getitem(logp, (np.arange(B)[:, None], positions[None, :], np.asarray(targets)))
        return -picked.mean()

    def decode_step(self, image, prefix_ids: Sequence[int], target_id: int, t: int = 0) -> StepTrace:
        """Forward on ``[visual; prefix]`` and backward from the logit of ``target_id``."""
        c = self.config
        if not 0 <= target_id < c.vocab_size:
            raise ValueError(f"target id {target_id} is outside the vocabulary of {c.vocab_size}")
        image = np.asarray(image, dtype=np.float64)
        ids = np.asarray(prefix_ids, dtype=np.int64)[None]
        position = c.n_visual + ids.shape[1] - 1

        def fn():
            logits = self.forward(image[None], ids)
            return {"logits": logits, "target": logits[0, position, target_id]}

        record = Record(fn, name=f"step{t}")
        out = record.forward()
        grads = record.backward("target")
        argmax = self.last_pool_argmax[0] if c.projector.kind is ProjectorKind.ADAPTIVE_MAX_POOL else None
        return StepTrace(
            t=t,
            target_id=int(target_id),
            position=position,
            logits=out["logits"].data[0, position].copy(),
            attn={k: v.data[0].copy() for k, v in record.taps.items()},
            grad_attn={k: grads[k][0].copy() for k in record.taps},
            pool_argmax=argmax,
        )

    def generate(self, image, prompt_ids: Sequence[int], max_len: int, text_ids: Sequence[int] | None = None,
                 mode: str = "teacher", eos_id: int = 2) -> GenerationRecord:
        """Trace every generation step.

        ``mode="teacher"`` targets the given ``text_ids`` one word at a time;
        ``mode="greedy"`` targets the argmax token and stops after EOS.
        """
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        if mode not in ("teacher", "greedy"):
            raise ValueError(f"unknown trace mode {mode!r}")
        if mode == "teacher" and text_ids is None:
            raise ValueError("teacher-forced tracing needs the target text")
        prefix = list(prompt_ids)
        steps, generated = [], []
        for t in range(max_len):
            if mode == "teacher":
                if t >= len(text_ids):
                    break
                target = int(text_ids[t])
            else:
                with_logits = self.forward(np.asarray(image)[None], np.array(prefix)[None])
                target = int(np.argmax(with_logits.data[0, -1]))
            steps.append(self.decode_step(image, prefix, target, t))
            generated.append(target)
            prefix.append(target)
            if mode == "greedy" and target == eos_id:
                break
        c = self.config
        return GenerationRecord(
            prompt_ids=list(prompt_ids),
            generated_ids=generated,
            steps=steps,
            n_patches=c.n_patches,
            n_visual=c.n_visual,
            projector_kind=c.projector.kind,
            decoder_layers=c.decoder_layers,
            resampler_layers=c.projector.resampler_layers if c.projector.kind is ProjectorKind.RESAMPLER else 0,
            mode=mode,
        )

    def greedy_caption(self, images, prompt_ids: Sequence[int], length: int) -> np.ndarray:
        """Batched greedy decoding of exactly ``length`` tokens, no tracing."""
        images = np.asarray(images, dtype=np.float64)
        ids = np.tile(np.asarray(prompt_ids), (images.shape[0], 1))
        visual = self._project(self._encode(images))
        for _ in range(length):
            logits = self._decode(visual, ids)
            ids = np.concatenate([ids, logits.data[:, -1].argmax(axis=-1)[:, None]], axis=1)
        return ids[:, len(prompt_ids):]

    # -- checkpoints -------------------------------------------------------
    def save(self, path) -> int:
        """Write parameters as a trace container plus a JSON manifest next to it."""
        from .traceio import write_trace

        path = Path(path)
        tensors = {f"{name}/param": p.data for name, p in self.params.items()}
        n = write_trace(path, tensors)
        manifest = {"config": self.config.to_dict(), "parameters": sorted(tensors)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return n

    @classmethod
    def load(cls, path) -> "ToyMLLM":
        from .traceio import read_trace

        path = Path(path)
        manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        model = cls(ModelConfig(**manifest["config"]), init="zeros")
        tensors = read_trace(path)
        missing = set(manifest["parameters"]) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name in model.params:
            model.params[name].data = tensors[f"{name}/param"].copy()
        return model
