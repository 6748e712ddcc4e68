"""
Reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active `Tape` only when one is open and
at least one input requires a gradient, so plain calls outside a tape are
inference-only and allocate no graph.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

_local = threading.local()
_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    def __init__(self, op, shape_a, shape_b):
        super().__init__(f'{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}')
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(bits):
    global _DEFAULT_DTYPE
    if bits not in (32, 64):
        raise ValueError(f'precision must be 32 or 64 bits, got {bits}')
    _DEFAULT_DTYPE = np.float64 if bits == 64 else np.float32


@contextmanager
def precision(bits):
    """Temporarily switch the default floating-point width."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(bits)
    try:
        yield
    finally:
        set_default_dtype(64 if previous == np.float64 else 32)


def active_tape():
    return getattr(_local, 'tape', None)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'parents', 'backward_fn', 'op', 'name')

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        data = np.asarray(data)
        if dtype is not None:
            data = data.astype(dtype, copy=False)
        elif not np.issubdtype(data.dtype, np.floating):
            data = data.astype(_DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = 'leaf'
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

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f', name={self.name}' if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})'

    # operator sugar, implemented in ops
    def __add__(self, other):
        from src.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.numerics import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from src.numerics import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from src.numerics import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from src.numerics import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from src.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from src.numerics import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from src.numerics import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from src.numerics import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_result(data, parents, backward_fn, op):
    """Wrap an op output and record it when a tape is listening.

    `backward_fn(g)` must return one gradient (or None) per parent and must not
    mutate `g`.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
        tape.record(out)
    return out


class Tape:
    """Ordered record of executed operations.

    Usage:
        with Tape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    One tape belongs to one thread; concurrent workers each open their own.
    """

    ORDERS = ('record', 'dfs')

    def __init__(self):
        self.nodes = []
        self._previous = None

    def __enter__(self):
        self._previous = active_tape()
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _local.tape = self._previous
        self._previous = None

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)

    def topological_order(self, root, order='record'):
        """Interior nodes reachable from `root`, parents before children."""
        if order == 'record':
            reachable = self._reachable(root)
            return [node for node in self.nodes if id(node) in reachable]
        if order == 'dfs':
            return self._dfs_postorder(root)
        raise ValueError(f'unknown traversal order {order!r}, expected one of {self.ORDERS}')

    @staticmethod
    def _reachable(root):
        seen = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or node.is_leaf:
                continue
            seen.add(id(node))
            stack.extend(node.parents)
        return seen

    @staticmethod
    def _dfs_postorder(root):
        out = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node.is_leaf:
                continue
            if expanded:
                out.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # reversed keeps the first parent explored first
            for parent in reversed(node.parents):
                if not parent.is_leaf and id(parent) not in seen:
                    stack.append((parent, False))
        return out

    def _propagate(self, root, seed, order):
        if root.is_leaf:
            raise ValueError('backward called on a tensor that was not produced on this tape')
        grads = {id(root): seed}
        leaves = {}
        for node in reversed(self.topological_order(root, order)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f'{node.op} backward', pg.shape, parent.shape)
                if parent.is_leaf:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        return leaves

    def gradient(self, root, inputs, order='record', seed=None):
        """Gradients of scalar `root` w.r.t. each leaf in `inputs`, without touching `.grad`.

        Leaves the root does not depend on get an all-zero gradient.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        leaves = self._propagate(root, seed, order)
        out = []
        for tensor in inputs:
            entry = leaves.get(id(tensor))
            out.append(entry[1] if entry is not None else np.zeros_like(tensor.data))
        return out

    def backward(self, root, order='record', seed=None):
        """Accumulate gradients of `root` additively into every reachable leaf's `.grad`."""
        if seed is None:
            seed = np.ones_like(root.data)
        for leaf, g in self._propagate(root, seed, order).values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
