"""Parameter-free 2D adaptive pooling over a square grid of patch tokens.

Tokens arrive flattened row-major, shape ``(..., in_side**2, d)``.  Each
output cell ``(i, j)`` averages (or maxes) the input window
``[r0, r1) x [c0, c1)`` with ``r0 = floor(i * in / out)`` and
``r1 = ceil((i + 1) * in / out)``, the same bins torch's AdaptiveAvgPool2d
uses.  Non-divisible sizes give overlapping windows.

The structural maps returned here are the linear operators the pooling
projectors induce from patches to output tokens; they double as the
Query-to-Patch relevance of those projectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .tensor import Tensor, as_tensor, function


@dataclass(frozen=True)
class PoolPlan:
    in_side: int
    out_side: int
    bins: Tuple[Tuple[int, int], ...]

    @property
    def n_in(self) -> int:
        return self.in_side * self.in_side

    @property
    def n_out(self) -> int:
        return self.out_side * self.out_side

    @property
    def uniform(self) -> bool:
        return self.in_side % self.out_side == 0

    @property
    def kernel(self) -> Optional[int]:
        """Window side K, defined only when the output side divides the input side."""
        return self.in_side // self.out_side if self.uniform else None

    @property
    def stride(self) -> Optional[int]:
        return self.kernel

    def window(self, m: int) -> Tuple[int, int, int, int]:
        """``(r0, r1, c0, c1)`` of flattened output token ``m``."""
        i, j = divmod(m, self.out_side)
        return self.bins[i] + self.bins[j]

    def window_indices(self, m: int) -> np.ndarray:
        """Flattened input indices inside the window of output ``m``, ascending."""
        r0, r1, c0, c1 = self.window(m)
        rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        return (rows * self.in_side + cols).ravel()

    def describe(self) -> str:
        lines = [f"in_side={self.in_side} out_side={self.out_side} kernel={self.kernel} stride={self.stride}"]
        for m in range(self.n_out):
            r0, r1, c0, c1 = self.window(m)
            lines.append(f"{m}: rows [{r0},{r1}) cols [{c0},{c1}) weight {1.0 / ((r1 - r0) * (c1 - c0)):.17g}")
        return "\n".join(lines)


def plan_bins(in_side: int, out_side: int) -> PoolPlan:
    if in_side < 1 or out_side < 1:
        raise ValueError("grid sides must be positive")
    if out_side > in_side:
        raise ValueError(f"pooling cannot upsample: out_side {out_side} > in_side {in_side}")
    # integer floor/ceil keep the bins exact for every size
    bins = tuple(
        ((i * in_side) // out_side, -((-(i + 1) * in_side) // out_side)) for i in range(out_side)
    )
    return PoolPlan(in_side, out_side, bins)


def _check_rows(x: np.ndarray, plan: PoolPlan, what="x"):
    if x.ndim < 2 or x.shape[-2] != plan.n_in:
        raise ValueError(f"{what} must have shape (..., {plan.n_in}, d) for in_side {plan.in_side}, got {x.shape}")


def pool_avg(x, plan: PoolPlan) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_rows(x, plan)
    grid = x.reshape(x.shape[:-2] + (plan.in_side, plan.in_side, x.shape[-1]))
    out = np.empty(x.shape[:-2] + (plan.out_side, plan.out_side, x.shape[-1]))
    # accumulate row-major, then divide once: fixes the rounding order
    for i, (r0, r1) in enumerate(plan.bins):
        for j, (c0, c1) in enumerate(plan.bins):
            acc = np.zeros(x.shape[:-2] + (x.shape[-1],))
            for r in range(r0, r1):
                for c in range(c0, c1):
                    acc = acc + grid[..., r, c, :]
            out[..., i, j, :] = acc / ((r1 - r0) * (c1 - c0))
    return out.reshape(x.shape[:-2] + (plan.n_out, x.shape[-1]))


def pool_max(x, plan: PoolPlan) -> Tuple[np.ndarray, np.ndarray]:
    """Max over each window; returns ``(values, argmax)``.

    ``argmax`` holds, per output token and channel, the flattened input index
    that won.  Ties go to the lowest flattened index.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_rows(x, plan)
    lead = x.shape[:-2]
    d = x.shape[-1]
    values = np.empty(lead + (plan.n_out, d))
    argmax = np.empty(lead + (plan.n_out, d), dtype=np.int64)
    for m in range(plan.n_out):
        idx = plan.window_indices(m)
        window = x[..., idx, :]
        # np.argmax returns the first occurrence and idx is ascending
        local = window.argmax(axis=-2)
        argmax[..., m, :] = idx[local]
        values[..., m, :] = np.take_along_axis(window, local[..., None, :], axis=-2)[..., 0, :]
    return values, argmax


def pool_backward(grad_out, plan: PoolPlan, mode: str = "avg", argmax=None) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim < 2 or grad_out.shape[-2] != plan.n_out:
        raise ValueError(f"grad_out must have shape (..., {plan.n_out}, d), got {grad_out.shape}")
    lead, d = grad_out.shape[:-2], grad_out.shape[-1]
    grad_in = np.zeros(lead + (plan.n_in, d))
    if mode == "avg":
        for m in range(plan.n_out):
            idx = plan.window_indices(m)
            grad_in[..., idx, :] += grad_out[..., m : m + 1, :] / idx.size
    elif mode == "max":
        if argmax is None:
            raise ValueError("max-mode backward needs the argmax record of the forward pass")
        argmax = np.asarray(argmax)
        if argmax.shape != grad_out.shape:
            raise ValueError(f"argmax shape {argmax.shape} does not match grad_out {grad_out.shape}")
        # scatter per (leading..., channel) along the token axis
        flat_g = grad_in.reshape(-1, plan.n_in, d)
        flat_go = grad_out.reshape(-1, plan.n_out, d)
        flat_am = argmax.reshape(-1, plan.n_out, d)
        channels = np.arange(d)
        for b in range(flat_g.shape[0]):
            for m in range(plan.n_out):
                np.add.at(flat_g[b], (flat_am[b, m], channels), flat_go[b, m])
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return grad_in


def structural_map_avg(plan: PoolPlan) -> np.ndarray:
    """M x N operator with ``1/|window|`` on each window, i.e. ``1/K**2`` when uniform."""
    out = np.zeros((plan.n_out, plan.n_in))
    for m in range(plan.n_out):
        idx = plan.window_indices(m)
        out[m, idx] = 1.0 / idx.size
    return out


def structural_map_max(plan: PoolPlan, argmax) -> np.ndarray:
    """One-hot rows at the patch that wins the most channels of each window."""
    if argmax is None:
        raise ValueError("structural_map_max needs the argmax record of a pool_max run")
    argmax = np.asarray(argmax)
    if argmax.ndim != 2 or argmax.shape[0] != plan.n_out:
        raise ValueError(f"argmax must have shape ({plan.n_out}, d), got {argmax.shape}")
    out = np.zeros((plan.n_out, plan.n_in))
    for m in range(plan.n_out):
        counts = np.bincount(argmax[m], minlength=plan.n_in)
        out[m, int(np.argmax(counts))] = 1.0
    return out


def structural_map_linear(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("N must be at least 1")
    return np.eye(n)


# ---------------------------------------------------------------------------
# differentiable wrappers used by the pooling projectors
# ---------------------------------------------------------------------------

def adaptive_avg_pool(x: Tensor, plan: PoolPlan) -> Tensor:
    x = as_tensor(x)
    return function(
        lambda a: pool_avg(a, plan),
        lambda g: (pool_backward(g, plan, "avg"),),
        x,
        op="adaptive_avg_pool",
    )


def adaptive_max_pool(x: Tensor, plan: PoolPlan) -> Tuple[Tensor, np.ndarray]:
    x = as_tensor(x)
    values, argmax = pool_max(x.data, plan)
    out = function(
        lambda a: values,
        lambda g: (pool_backward(g, plan, "max", argmax),),
        x,
        op="adaptive_max_pool",
    )
    return out, argmax


def grid_of(n_tokens: int) -> int:
    """Side of a square token grid, or ValueError when ``n_tokens`` is not a square."""
    side = int(round(np.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ValueError(f"{n_tokens} tokens do not form a square grid")
    return side


__all__: List[str] = [
    "PoolPlan",
    "plan_bins",
    "pool_avg",
    "pool_max",
    "pool_backward",
    "structural_map_avg",
    "structural_map_max",
    "structural_map_linear",
    "adaptive_avg_pool",
    "adaptive_max_pool",
    "grid_of",
]
