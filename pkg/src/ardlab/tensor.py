"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays for storage, a linear tape
(Wengert list) for the graph, and exactly the primitives the rest of the
package needs.  Ops executed while a Tape is active record a backward
closure; ops executed with no active tape are plain eager numpy compute
and carry no graph, which is what the inference paths rely on.

Rules the engine enforces rather than documents away:
  * everything is float32; inputs are converted once at the boundary
  * gradients are plain numpy arrays, not Tensors, so the engine is
    first order only and an attempt to differentiate a gradient fails
    loudly instead of silently computing garbage
  * backward requires a scalar root recorded on the tape being asked
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from .errors import DegenerateMaskError, GraphError, ShapeError

_F32 = np.float32
_INV_SQRT2 = _F32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = _F32(1.0 / math.sqrt(2.0 * math.pi))


class Tensor:
    """A float32 array plus autodiff bookkeeping.

    ``data`` must be treated as immutable once the tensor exists; ops
    return fresh tensors (possibly numpy views) and never write back.
    """

    __slots__ = ("data", "requires_grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing the same values, cut from any graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every path funnels into the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_ACTIVE: list["Tape"] = []


class Tape:
    """Records ops executed inside its ``with`` block.

    ``backward`` may be called several times with different scalar roots
    from the same recorded graph (the training loop differentiates the
    regression and adversarial losses separately and mixes the gradient
    maps itself).  Each call is an independent reverse sweep; gradients
    are returned, never accumulated onto tensors.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaves(self) -> list[Tensor]:
        """All distinct requires_grad leaves referenced by the tape."""
        seen: dict[int, Tensor] = {}
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and not t._from_op and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns a map from every requires_grad leaf on the tape to its
        gradient; leaves the root does not depend on get exact zeros.
        Gradients are numpy float32 arrays.  They are not tensors and
        cannot be differentiated again: second order is out of scope.
        """
        if not isinstance(root, Tensor):
            raise GraphError("backward expects a Tensor root; gradients themselves "
                             "are plain arrays and cannot be differentiated")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        if not root.requires_grad or not root._from_op:
            raise GraphError("root is not a value computed on this tape")
        produced = {id(n.out) for n in self._nodes}
        if id(root) not in produced:
            raise GraphError("root was recorded on a different tape")

        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data)
        }
        # nodes were appended in execution order, so a single reversed scan
        # visits every node after all of its consumers
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.bwd(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out: dict[Tensor, np.ndarray] = {}
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            out[leaf] = np.asarray(g, dtype=np.float32)
        return out


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        tape._nodes.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_operand(x):
    """Accept Tensor, python number, or numpy array (treated as constant)."""
    if isinstance(x, Tensor):
        return x, None
    if isinstance(x, (int, float, np.floating, np.integer)):
        return None, _F32(x)
    if isinstance(x, np.ndarray):
        return Tensor(x), None
    raise ShapeError(f"unsupported operand type {type(x).__name__}")


def add(a: Tensor, b) -> Tensor:
    bt, bs = _as_operand(b)
    if bt is None:
        out = Tensor(a.data + bs)
        return _record(out, (a,), lambda g: (g,))
    out = Tensor(a.data + bt.data)
    ash, bsh = a.data.shape, bt.data.shape
    return _record(out, (a, bt),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b) -> Tensor:
    bt, bs = _as_operand(b)
    if bt is None:
        out = Tensor(a.data - bs)
        return _record(out, (a,), lambda g: (g,))
    out = Tensor(a.data - bt.data)
    ash, bsh = a.data.shape, bt.data.shape
    return _record(out, (a, bt),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def mul(a: Tensor, b) -> Tensor:
    bt, bs = _as_operand(b)
    if bt is None:
        out = Tensor(a.data * bs)
        return _record(out, (a,), lambda g: (g * bs,))
    out = Tensor(a.data * bt.data)
    ad, bd = a.data, bt.data
    return _record(out, (a, bt),
                   lambda g: (_unbroadcast(g * bd, ad.shape),
                              _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise ShapeError("matmul needs two tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, _F32(0)))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf based) GELU: x * Phi(x)."""
    x = a.data
    phi = _F32(0.5) * (_F32(1.0) + _erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def bwd(g):
        pdf = np.exp(_F32(-0.5) * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(str(e)) from None
    old = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, key) -> Tensor:
    """Basic (slice / integer / ellipsis) indexing with gradient."""
    out = Tensor(a.data[key])
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float32)
        full[key] += g
        return (full,)

    return _record(out, (a,), bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(shape)), shape).astype(np.float32, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(np.float32, copy=True),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional boolean admissibility mask.

    Masked-out entries are excluded exactly: they contribute zero weight
    (not a tiny positive number), so an inadmissible key can never leak
    into the output.  A row with no admissible entry is an error.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax row with every key masked out")
        neg = np.where(mask, x, -np.inf)
    else:
        neg = x
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m, dtype=np.float32)
    if mask is not None:
        e = np.where(mask, e, _F32(0))
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (a,), bwd)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x = a.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layernorm affine must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _F32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        gg = g * gain.data
        mean_gg = gg.mean(axis=-1, keepdims=True)
        mean_gx = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gg - mean_gg - xhat * mean_gx)
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx.astype(np.float32, copy=False), dgain, dbias

    return _record(out, (a, gain, bias), bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding): table (V, d) indexed by an integer array."""
    ii = np.asarray(idx)
    if not np.issubdtype(ii.dtype, np.integer):
        raise ShapeError("gather_rows needs integer indices")
    if table.ndim != 2:
        raise ShapeError("gather_rows table must be rank 2")
    if ii.size and (ii.min() < 0 or ii.max() >= table.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = Tensor(table.data[ii])
    vshape = table.data.shape

    def bwd(g):
        gt = np.zeros(vshape, dtype=np.float32)
        np.add.at(gt, ii, g)
        return (gt,)

    return _record(out, (table,), bwd)
