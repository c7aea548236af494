"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node that remembers its parents and a closure
mapping the output gradient to parent gradients.  A :class:`Record` wraps a
forward function so that named intermediate values (attention
probabilities) can be tapped, their gradients retained after
:meth:`Record.backward`, and optionally replaced by fresh inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import erf

_node_ids = itertools.count()
_active_records: list["Record"] = []


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class Tensor:
    """A float64 array that participates in the recorded computation."""

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents: tuple = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = next(_node_ids)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        """Back-propagate from this scalar; populates ``grad`` on the graph."""
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar target, got shape {self.shape}")
        _backprop(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _backprop(root: Tensor) -> list:
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = parent.grad + g
    return order


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=backward, op="add")


def neg(a) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward_fn=lambda g: (-g,), op="neg")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=backward, op="mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, parents=(a, b), backward_fn=backward, op="matmul")


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; True marks entries
    that are excluded.  Excluded entries come out as exactly 0.
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        masked = np.where(mask, -np.inf, x.data)
        z = masked - masked.max(axis=-1, keepdims=True)
        e = np.where(mask, 0.0, np.exp(z))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, parents=(x,), backward_fn=backward, op="softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor(
        xhat * gamma.data + beta.data,
        parents=(x, gamma, beta),
        backward_fn=backward,
        op="layer_norm",
    )


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)

    def backward(g):
        return (g * (cdf + x.data * pdf),)

    return Tensor(x.data * cdf, parents=(x,), backward_fn=backward, op="gelu")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor(table.data[ids], parents=(table,), backward_fn=backward, op="embedding")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor(out, parents=(x,), backward_fn=lambda g: (g.reshape(x.shape),), op="reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return Tensor(
        np.transpose(x.data, axes),
        parents=(x,),
        backward_fn=lambda g: (np.transpose(g, inverse),),
        op="transpose",
    )


def getitem(x, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back with ``np.add.at``."""
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(x.data[index], parents=(x,), backward_fn=backward, op="slice")


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(out, parents=tuple(tensors), backward_fn=backward, op="concat")


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


def function(forward: Callable, backward: Callable, *inputs: Tensor, op="custom") -> Tensor:
    """Wrap an external numpy kernel as a primitive.

    ``forward(*arrays) -> array`` and ``backward(grad_out) -> tuple of input grads``.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    out = forward(*(t.data for t in inputs))
    return Tensor(out, parents=inputs, backward_fn=backward, op=op)


# ---------------------------------------------------------------------------
# records and taps
# ---------------------------------------------------------------------------

def tap(name: str, tensor: Tensor) -> Tensor:
    """Mark ``tensor`` so its gradient is kept under ``name``.

    Outside an active :class:`Record` this is the identity.  Inside one, an
    override for ``name`` replaces the value by a fresh leaf, which is how
    finite-difference checks perturb an intermediate.
    """
    if not _active_records:
        return tensor
    return _active_records[-1]._tap(name, tensor)


class Record:
    """A traced forward function with named inputs, outputs and taps.

    ``fn`` receives keyword Tensors and returns a dict of output Tensors.
    Calling :meth:`forward` records the graph; :meth:`backward` then
    differentiates one scalar output and returns the gradients of every
    input and every tap.
    """

    def __init__(self, fn: Callable[..., Mapping[str, Tensor]], name: str = "record"):
        self.fn = fn
        self.name = name
        self.inputs: Dict[str, Tensor] = {}
        self.outputs: Dict[str, Tensor] = {}
        self.taps: Dict[str, Tensor] = {}
        self.nodes: list = []
        self._overrides: Mapping[str, np.ndarray] = {}

    def _tap(self, name, tensor):
        if name in self.taps:
            raise KeyError(f"tap {name!r} recorded twice in {self.name}")
        if name in self._overrides:
            tensor = Tensor(self._overrides[name], requires_grad=True, op="tap-override")
        else:
            tensor.requires_grad = True
        self.taps[name] = tensor
        return tensor

    def forward(self, inputs: Mapping[str, object] | None = None, overrides: Mapping[str, np.ndarray] | None = None):
        inputs = inputs or {}
        self.inputs = {
            k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in inputs.items()
        }
        self.taps = {}
        self.nodes = []
        self._overrides = overrides or {}
        _active_records.append(self)
        try:
            outputs = self.fn(**self.inputs)
        finally:
            _active_records.pop()
            self._overrides = {}
        if isinstance(outputs, Tensor):
            outputs = {"out": outputs}
        self.outputs = dict(outputs)
        return self.outputs

    def backward(self, target: str | Tensor) -> Dict[str, np.ndarray]:
        if not self.outputs:
            raise RuntimeError(f"{self.name}: backward called before forward")
        node = self.outputs[target] if isinstance(target, str) else target
        if node.data.shape != ():
            raise ShapeError(f"{self.name}: backward target must be a scalar, got shape {node.shape}")
        for t in itertools.chain(self.inputs.values(), self.taps.values()):
            t.grad = np.zeros_like(t.data)
        self.nodes = _backprop(node)
        grads = {k: t.grad for k, t in self.inputs.items()}
        grads.update({k: t.grad for k, t in self.taps.items()})
        return grads


def finite_diff_check(
    record: Record,
    target: str,
    tensor: str | Tensor,
    h: float = 1e-5,
    inputs: Mapping[str, object] | None = None,
    indices: Iterable | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``tensor`` is an input name, a tap name, or a leaf Tensor captured by the
    forward function (e.g. a model parameter), perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)) for k, v in (inputs or {}).items()}

    record.forward(inputs)
    grads = record.backward(target)
    if isinstance(tensor, Tensor):
        analytic = tensor.grad.copy()
        base = tensor.data
    elif tensor in inputs:
        analytic = grads[tensor].copy()
        base = inputs[tensor]
    else:
        analytic = grads[tensor].copy()
        base = record.taps[tensor].data.copy()

    def evaluate(value):
        if isinstance(tensor, Tensor):
            saved = tensor.data
            tensor.data = value
            try:
                return float(record.forward(inputs)[target].data)
            finally:
                tensor.data = saved
        if tensor in inputs:
            return float(record.forward({**inputs, tensor: value})[target].data)
        return float(record.forward(inputs, overrides={tensor: value})[target].data)

    worst = 0.0
    flat_indices = range(base.size) if indices is None else indices
    for flat in flat_indices:
        idx = np.unravel_index(flat, base.shape)
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    record.forward(inputs)
    return worst
