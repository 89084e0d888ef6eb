"""Reverse-mode differentiable tensor.

Every operation on tensors that require gradients is recorded as a node on an
implicit tape.  Each node carries a monotonically increasing sequence number,
so ``backward`` replays exactly the reverse recording order of the nodes that
are reachable from the loss.  Nothing is retained globally: once the loss
tensor is dropped the tape goes with it.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (evaluation, optimizer updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` which maps
    the output gradient to one gradient (or ``None``) per tensor input.
    """

    parents: Tuple["Tensor", ...] = ()
    seq: int = -1

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(fn.needs_grad)
        result = Tensor(out)
        if requires_grad:
            # interior nodes never hold a gradient buffer
            result.requires_grad = True
            fn.parents = tensors
            fn.seq = next(_sequence)
            result._fn = fn
        return result


class Tensor:
    """Dense real array participating in the differentiation graph.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient and accumulate into it on every ``backward`` call.
    """

    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self._fn: Optional[Function] = None
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def check_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains NaN or Inf")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # autodiff ---------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # operators --------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._fn is None:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return

    # collect reachable nodes, then replay in reverse recording order
    nodes = {}
    stack = [loss._fn]
    while stack:
        fn = stack.pop()
        if fn.seq in nodes:
            continue
        nodes[fn.seq] = fn
        for parent in fn.parents:
            if parent._fn is not None and parent._fn.seq not in nodes:
                stack.append(parent._fn)

    grads = {loss._fn.seq: np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        fn = nodes[seq]
        grad = grads.pop(seq, None)
        if grad is None:
            continue
        input_grads = fn.backward(grad)
        for parent, g in zip(fn.parents, input_grads):
            if g is None or not parent.requires_grad:
                continue
            # keep gradients in the parent's precision
            g = g.astype(parent.data.dtype, copy=False)
            if parent._fn is None:
                parent.grad = parent.grad + g
            else:
                key = parent._fn.seq
                grads[key] = grads[key] + g if key in grads else g
        # free saved activations as soon as a node has run
        fn.parents = ()
