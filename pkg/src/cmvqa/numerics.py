"""Dense f64 tensors with a reverse-mode tape.

A :class:`Tape` is opened as a context manager around one forward pass.
Every primitive below records a node on the innermost active tape when at
least one operand requires a gradient; :func:`backward` then replays the
nodes in reverse and accumulates into ``Tensor.grad``.

Leaf gradients (parameters) are preallocated buffers and are only ever
updated in place, so named views into them stay valid across passes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, TapeError

__all__ = [
    "Tensor", "Parameter", "Tape", "backward", "checked", "record",
    "linear_map", "elementwise", "sigmoid", "tanh", "multiply", "add",
    "scale", "concat", "stack", "gather", "row", "sum_all",
    "softmax", "softmax_cross_entropy", "active_tape", "SIGMOID_CLIP",
]

# exp(-x) stays finite for |x| <= 500; sigmoid(-500) ~ 7e-218 so the clip is
# numerically invisible. Kernels use the same constant.
SIGMOID_CLIP = 500.0

_TAPES: list[Tape] = []
_CHECKED = False


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject non-finite values whenever a Tensor is built inside the block."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensor extents must be positive")
        if _CHECKED:
            _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        if _CHECKED:
            _check_finite(arr)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def leaf(shape, name=None):
    """Trainable leaf with a zeroed, preallocated gradient buffer."""
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass(eq=False)
class Parameter:
    """A named, possibly partial, view of a trainable leaf.

    ``value`` and ``grad`` alias the leaf's buffers, so several parameters
    may share one contiguous leaf (e.g. the four gate blocks of an LSTM).
    """

    name: str
    tensor: Tensor
    index: object = Ellipsis

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data[self.index]

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def assign(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise DimensionError(
                f"{self.name}: expected shape {self.shape}, got {values.shape}")
        self.tensor.data[self.index] = values


@dataclass(eq=False)
class _Node:
    outputs: tuple
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of the primitives applied during one forward pass."""

    def __init__(self, single_use=False):
        self.nodes: list[_Node] = []
        self.single_use = single_use
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _TAPES[-1] if _TAPES else None


def record(outputs: Sequence[Tensor], inputs: Sequence[Tensor], backward_fn):
    """Register a node on the active tape.

    ``backward_fn(*output_grads)`` must return one gradient (or ``None``)
    per input, each a freshly allocated array.
    """
    if not _TAPES:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    _TAPES[-1].nodes.append(_Node(tuple(outputs), tuple(inputs), backward_fn))


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf reachable on ``tape``.

    Leaf gradients accumulate across calls; intermediate gradients are
    reset at the start of each call.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    if tape.single_use and tape.consumed:
        raise TapeError("tape already consumed")
    if not loss.requires_grad:
        raise TapeError("loss was not recorded on a tape")
    for node in tape.nodes:
        for o in node.outputs:
            o.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        gouts = [o.grad for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g
                 for o, g in zip(node.outputs, gouts)]
        gins = node.backward(*gouts)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64)
            else:
                t.grad += g
    tape.consumed = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitives ------------------------------------------------------------

def linear_map(W: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b``; ``x`` may carry a leading batch axis (rows)."""
    W, x = _as_tensor(W), _as_tensor(x)
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.data.shape[-1] != W.data.shape[1]:
        raise DimensionError(
            f"linear_map: W{W.data.shape} incompatible with x{x.data.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (W.data.shape[0],):
            raise DimensionError(
                f"linear_map: bias b{b.data.shape} does not match W{W.data.shape}")
    batched = x.data.ndim == 2
    out = x.data @ W.data.T if batched else W.data @ x.data
    if b is not None:
        out = out + b.data
    y = Tensor._wrap(out)
    xd, Wd = x.data, W.data

    def back(g):
        if batched:
            return (g.T @ xd, g @ Wd, None if b is None else g.sum(axis=0))
        return (np.outer(g, xd), Wd.T @ g, None if b is None else g.copy())

    record([y], [W, x] if b is None else [W, x, b], back)
    return y


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -SIGMOID_CLIP, SIGMOID_CLIP)))
    y = Tensor._wrap(s)
    record([y], [x], lambda g: (g * s * (1.0 - s),))
    return y


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    y = Tensor._wrap(t)
    record([y], [x], lambda g: (g * (1.0 - t * t),))
    return y


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "multiply")
    ad, bd = a.data, b.data
    y = Tensor._wrap(ad * bd)
    record([y], [a, b], lambda g: (g * bd, g * ad))
    return y


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    y = Tensor._wrap(a.data + b.data)
    record([y], [a, b], lambda g: (g.copy(), g.copy()))
    return y


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    y = Tensor._wrap(a.data * factor)
    record([y], [a], lambda g: (g * factor,))
    return y


_ELEMENTWISE = {
    "sigmoid": (sigmoid, 1),
    "tanh": (tanh, 1),
    "multiply": (multiply, 2),
    "add": (add, 2),
    "scale": (scale, 2),
}


def elementwise(kind: str, *operands):
    """Dispatch by name: sigmoid, tanh, multiply, add, scale(x, factor)."""
    try:
        fn, arity = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if len(operands) != arity:
        raise TypeError(f"{kind} takes {arity} operand(s), got {len(operands)}")
    return fn(*operands)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join 1-D tensors end to end."""
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise DimensionError("concat expects 1-D operands")
    sizes = [p.data.shape[0] for p in parts]
    y = Tensor._wrap(np.concatenate([p.data for p in parts]))
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]].copy() for i in range(len(parts)))

    record([y], parts, back)
    return y


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped 1-D tensors into rows."""
    parts = [_as_tensor(p) for p in parts]
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError(f"stack: shape {p.data.shape} != {shape}")
    y = Tensor._wrap(np.stack([p.data for p in parts]))
    record([y], parts, lambda g: tuple(g[i].copy() for i in range(len(parts))))
    return y


def gather(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a 2-D table; only that row receives gradient."""
    n = table.data.shape[0]
    if not 0 <= index < n:
        raise IndexError(f"row {index} out of range for table with {n} rows")
    y = Tensor._wrap(table.data[index].copy())

    def back(g):
        full = np.zeros_like(table.data)
        full[index] = g
        return (full,)

    record([y], [table], back)
    return y


row = gather


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = Tensor._wrap(np.asarray(x.data.sum()))
    record([y], [x], lambda g: (np.full_like(x.data, float(g)),))
    return y


def softmax(logits: np.ndarray, axis=-1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Sum over masked rows of ``-log softmax(logits[t])[targets[t]]``.

    Rows outside the mask contribute nothing and receive exactly zero
    gradient; their targets are ignored.
    """
    L = logits.data
    if L.ndim != 2:
        raise DimensionError(f"logits must be (T, V), got {L.shape}")
    T, V = L.shape
    if len(targets) != T or len(mask) != T:
        raise DimensionError(
            f"targets/mask length {len(targets)}/{len(mask)} != {T} logit rows")
    rows = [t for t in range(T) if mask[t]]
    probs = np.zeros_like(L)
    total = 0.0
    for t in rows:
        tgt = int(targets[t])
        if not 0 <= tgt < V:
            raise IndexError(f"target {tgt} outside vocabulary of size {V}")
        z = L[t] - L[t].max()
        lse = np.log(np.exp(z).sum())
        total += lse - z[tgt]
        probs[t] = np.exp(z - lse)
        probs[t, tgt] -= 1.0
    y = Tensor._wrap(np.asarray(total))
    record([y], [logits], lambda g: (probs * float(g),))
    return y
