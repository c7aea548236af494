"""Binary tensor container and plain-text run configuration.

Container layout, all integers little-endian, no padding::

    b"RGAE"  u32 version  u32 record_count
    per record: u16 name_len, name (UTF-8), u8 dtype (1=f64, 2=f32),
                u8 ndim, u64 dims[ndim], raw little-endian payload (row-major)

Names follow ``<module>/<layer>/<kind>`` with kind one of ``attn``,
``grad_attn``, ``param`` or ``map``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"RGAE"
VERSION = 1
KINDS = ("attn", "grad_attn", "param", "map")
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_NAME = re.compile(r"^[^/\s]+/[^/\s]+/(attn|grad_attn|param|map)$")


class TraceFormatError(ValueError):
    """Base class for malformed trace containers."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    pass


class TruncatedError(TraceFormatError):
    pass


class DuplicateNameError(TraceFormatError):
    pass


def validate_name(name: str):
    if not _NAME.match(name):
        raise ValueError(f"invalid tensor name {name!r}: expected <module>/<layer>/<kind> with kind in {KINDS}")


def encode_trace(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        validate_name(name)
        arr = np.asarray(value)
        code = 2 if arr.dtype == np.float32 else 1
        arr = arr.astype(DTYPES[code], order="C", copy=False)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} holds NaN or Inf; traces must be finite")
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def write_trace(path, tensors: Mapping[str, np.ndarray]) -> int:
    """Write ``tensors`` in iteration order; returns the byte count."""
    data = encode_trace(tensors)
    Path(path).write_bytes(data)
    return len(data)


def decode_trace(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not an RGAE trace container")
    if len(data) < 12:
        raise TruncatedError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unknown trace format version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"truncated {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"record {i} name length"))
        name = take(name_len, f"record {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"record {name!r} header"))
        if code not in DTYPES:
            raise TraceFormatError(f"record {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"record {name!r} dims"))
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(size, f"payload of record {name!r}")
        if name in out:
            raise DuplicateNameError(f"duplicate record name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)
    return out


def read_trace(path) -> Dict[str, np.ndarray]:
    """Read a container; f32 payloads are widened to f64 exactly."""
    return decode_trace(Path(path).read_bytes())


def export_csv(matrix, path):
    """One line per row, 17 significant digits, LF endings."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"export_csv needs a 2-D map, got shape {m.shape}")
    lines = [",".join(f"{v:.17g}" for v in row) for row in m]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    patch_grid_side: int = 4
    embed_dim_vision: int = 32
    embed_dim_text: int = 32
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    projector: str = "avgpool"
    out_tokens: int = 4
    resampler_layers: int = 2
    cross_rule: str = "normalized"
    trace_mode: str = "teacher"
    seed: int = 0
    data_seed: int = 1
    stages: int = 2
    steps_per_stage: int = 200
    lr: float = 0.1
    batch_size: int = 16
    output_dir: str = "runs/default"

    def model_config(self):
        from .model import ModelConfig, ProjectorConfig

        return ModelConfig(
            patch_grid_side=self.patch_grid_side,
            embed_dim_vision=self.embed_dim_vision,
            embed_dim_text=self.embed_dim_text,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            projector=ProjectorConfig(self.projector, self.out_tokens, self.resampler_layers),
            seed=self.seed,
        )


def parse_run_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = casts[types[key]](value)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {value!r} for {key}") from None
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))
