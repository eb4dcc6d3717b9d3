"""Reverse-mode autodiff over numpy arrays.

Every primitive builds a node holding its output array, its parent
tensors and a closure mapping the output gradient to parent gradients.
``backward`` walks the recorded graph once in reverse topological order;
only leaves keep their ``.grad``.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import NonFiniteError

_state = threading.local()

TEST_DTYPE = np.float64
RUN_DTYPE = np.float32


def _get(attr, default):
    return getattr(_state, attr, default)


def default_dtype():
    return _get("dtype", RUN_DTYPE)


def grad_enabled():
    return _get("grad", True)


def finite_checks():
    return _get("check_finite", False)


@contextlib.contextmanager
def precision(mode):
    """Switch the working dtype: ``"test"`` is float64, ``"run"`` float32.

    Test mode also turns on per-primitive finiteness checks.
    """
    if mode not in ("test", "run"):
        raise ValueError(f"unknown precision mode {mode!r}")
    old = (_get("dtype", RUN_DTYPE), _get("check_finite", False))
    _state.dtype = TEST_DTYPE if mode == "test" else RUN_DTYPE
    _state.check_finite = mode == "test"
    try:
        yield
    finally:
        _state.dtype, _state.check_finite = old


@contextlib.contextmanager
def check_finite(enabled=True):
    old = _get("check_finite", False)
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


@contextlib.contextmanager
def no_grad():
    old = _get("grad", True)
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def swapaxes(self, a, b):
        from . import functional as F
        return F.swapaxes(self, a, b)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_node(data, parents, backward_fn, op):
    """Wrap a primitive's output; record it only if some parent needs grad."""
    if finite_checks() and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, grad=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar output")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
