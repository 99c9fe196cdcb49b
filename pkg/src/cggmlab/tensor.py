"""A small reverse-mode automatic differentiation engine on top of numpy.

Every value is a float64 array. A :class:`Tensor` produced by an operation
keeps references to its parents and a closure mapping the upstream gradient
to one gradient per parent. :meth:`Tensor.backward` walks the graph in reverse
creation order, which is always a valid topological order because a node is
created strictly after its parents.

Broadcasting is limited to the two cases the models need: an operand whose
shape is a trailing suffix of the other's, and single-element operands.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_counter = itertools.count()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715
LAYERNORM_EPS = 1e-5
COSINE_EPS = 1e-12


class Tensor:
    """n-dimensional float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable | None = _backward
        self._id = next(_counter)
        self.op = op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'})"

    def detach(self) -> Tensor:
        return detach(self)

    def zero_grad(self):
        self.grad = None

    # ---------------------------------------------------------------- backward
    def backward(self, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Only single-element tensors can be differentiated. Repeated calls
        without clearing add to the existing gradients. Unless
        ``retain_graph`` is set, the intermediate nodes are unlinked afterwards
        so the graph can be garbage collected.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        if not retain_graph:
            for node in nodes:
                if node._parents:
                    node._parents = ()
                    node._backward = None

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return flatten(self)

    @property
    def T(self):
        return transpose(self)


def _reachable(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in reverse creation order."""
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def detach(t: Tensor) -> Tensor:
    """Value-equal tensor with no graph linkage (shares the value buffer)."""
    return Tensor(t.data)


# ---------------------------------------------------------------- parameters
INIT_RULES = ("uniform-fan-in", "zeros", "ones", "given-values")


def create_parameter(shape, init: str = "uniform-fan-in", seed=None, values=None, fan_in=None) -> Tensor:
    """Leaf tensor with ``requires_grad=True``.

    ``uniform-fan-in`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in
    defaults to the first dimension. ``seed`` may be anything accepted by
    :func:`numpy.random.default_rng`.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid parameter shape {shape}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "given-values":
        if values is None:
            raise ValueError("given-values init needs values")
        data = np.array(values, dtype=np.float64).reshape(shape)
    elif init == "uniform-fan-in":
        fan = shape[0] if fan_in is None else int(fan_in)
        bound = 1.0 / math.sqrt(fan)
        data = np.random.default_rng(seed).uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init rule {init!r}; expected one of {INIT_RULES}")
    return Tensor(data, requires_grad=True)


# ----------------------------------------------------------- broadcasting
def _check_broadcast(sa, sb):
    if sa == sb:
        return
    na, nb = math.prod(sa), math.prod(sb)
    if na == 1 or nb == 1:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(out, (a,), backward, "gelu")


def sign(a: Tensor) -> Tensor:
    # Zero derivative everywhere, including the subgradient choice at 0.
    return _node(np.sign(a.data), (a,), lambda g: (None,), "sign")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand or the constant for scale."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale-by-constant":
        return scale(as_tensor(a), b)
    unary = {"relu": relu, "gelu": gelu, "sign": sign, "abs": abs_}
    if op in unary:
        return unary[op](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward, "matmul")


# -------------------------------------------------------- reductions/shape
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else math.prod(a.shape[ax] for ax in axes)
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Row-major flattening to a vector."""
    return reshape(a, (a.size,))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = list(itertools.accumulate(sizes))[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tensors, backward, "concat")


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), backward, "slice")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), backward, "layernorm")


def reduction(op: str, *args, **kwargs) -> Tensor:
    """Dispatch reductions and shape operations by name."""
    table = {
        "sum": sum_,
        "mean": mean,
        "concat-last-dim": lambda ts: concat(ts, axis=-1),
        "flatten": flatten,
        "slice": slice_,
        "softmax-last-dim": softmax,
        "log-softmax-last-dim": log_softmax,
        "layernorm-last-dim": layernorm,
    }
    if op not in table:
        raise ValueError(f"unknown reduction/shape op {op!r}")
    return table[op](*args, **kwargs)


# ------------------------------------------------------------------ cosine
def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """u.v / ((|u| + eps)(|v| + eps)) over the flattened inputs."""
    u, v = as_tensor(u), as_tensor(v)
    if u.size != v.size or u.size == 0:
        raise ShapeError(f"cosine similarity needs equal non-zero sizes, got {u.shape} and {v.shape}")
    ud, vd = u.data.reshape(-1), v.data.reshape(-1)
    nu, nv = float(np.sqrt(ud @ ud)), float(np.sqrt(vd @ vd))
    du, dv = nu + eps, nv + eps
    dot = float(ud @ vd)
    c = dot / (du * dv)
    c = min(1.0, max(-1.0, c))

    def backward(g):
        g = float(g.reshape(()))
        uhat = ud / nu if nu > 0 else np.zeros_like(ud)
        vhat = vd / nv if nv > 0 else np.zeros_like(vd)
        gu = g * (vd / (du * dv) - dot / (du * du * dv) * uhat)
        gv = g * (ud / (du * dv) - dot / (du * dv * dv) * vhat)
        return gu.reshape(u.shape), gv.reshape(v.shape)

    return _node(np.array(c), (u, v), backward, "cosine")


# ------------------------------------------------------------------ losses
def one_hot(targets, classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    out = np.zeros((targets.shape[0], classes))
    out[np.arange(targets.shape[0]), targets] = 1.0
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    oh = Tensor(one_hot(targets, logits.shape[-1]))
    return scale(sum_(mul(log_softmax(logits), oh)), -1.0 / logits.shape[0])


def l1_loss(pred: Tensor, targets) -> Tensor:
    t = Tensor(np.asarray(targets, dtype=np.float64).reshape(pred.shape))
    return mean(abs_(sub(pred, t)))
