"""Dense tensors and the reverse-mode tape.

Operations only record onto a tape while one is active (``with Tape() as tape``)
and at least one input is tracked. Outside a tape every op is a plain numpy
computation, which is what evaluation and generation use.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from evslt.errors import NonScalarLoss

_state = threading.local()


class Tensor:
    """An n-dimensional array, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "node", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from evslt.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from evslt.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from evslt.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from evslt.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from evslt.numerics import ops
        return ops.div(self, other)

    def __neg__(self):
        from evslt.numerics import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from evslt.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from evslt.numerics import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from evslt.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from evslt.numerics import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from evslt.numerics import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from evslt.numerics import ops
        return ops.mean(self, axis, keepdims)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple[int, ...]
    dtype: np.dtype


@dataclass
class Tape:
    """Append-only record of operations; node ids are creation order."""

    nodes: list[_Node] = field(default_factory=list)
    # id(tensor) -> (node id, tensor); the tensor reference pins the id
    leaves: dict[int, tuple[int, Tensor]] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def watch(self, *tensors: Tensor) -> list[int]:
        """Register leaves so that they receive (possibly zero) gradients."""
        return [self._leaf(t) for t in tensors]

    def node_of(self, tensor: Tensor) -> Optional[int]:
        if tensor.tape is self:
            return tensor.node
        entry = self.leaves.get(id(tensor))
        return None if entry is None else entry[0]

    def _leaf(self, tensor: Tensor) -> int:
        entry = self.leaves.get(id(tensor))
        if entry is not None:
            return entry[0]
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, tensor.shape, tensor.dtype))
        self.leaves[id(tensor)] = (nid, tensor)
        return nid

    def _input_id(self, tensor: Tensor) -> Optional[int]:
        if tensor.tape is self and tensor.node is not None:
            return tensor.node
        if tensor.requires_grad:
            return self._leaf(tensor)
        return None


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` and, when a tape is active, record the node producing it.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    ids = tuple(tape._input_id(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    nid = len(tape.nodes)
    tape.nodes.append(_Node(kind, ids, backward, out.shape, out.dtype))
    result.node = nid
    result.tape = tape
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every leaf on ``tape``.

    Returns a map from leaf node id to gradient; leaves that do not influence
    the loss get zeros.
    """
    if loss.shape != ():
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    if loss.tape is tape and loss.node is not None:
        grads[loss.node] = np.ones((), dtype=loss.dtype)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            node = tape.nodes[nid]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if parent is None or pg is None:
                    continue
                assert parent < nid, "tape order violated"
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
            if node.kind != "leaf":
                grads[nid] = None
    out = {}
    for nid, _ in tape.leaves.values():
        node = tape.nodes[nid]
        g = grads[nid]
        out[nid] = Tensor(np.zeros(node.shape, node.dtype) if g is None else np.asarray(g, node.dtype))
    return out


def gradients(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience wrapper: gradients aligned with ``params``."""
    tape.watch(*params)
    gmap = backward(tape, loss)
    return [gmap[tape.node_of(p)].data for p in params]
