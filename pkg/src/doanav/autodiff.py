"""Small dense-tensor library with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  Calling
``loss.backward()`` walks the graph in reverse topological order.

Gradients on leaf tensors accumulate across separate graphs until
:meth:`Tensor.zero_grad` is called; a single graph can only be
back-propagated once (its closures are released afterwards).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class GraphError(RuntimeError):
    """Raised for misuse of the computation graph (non-scalar loss, reuse)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        """Back-propagate from this scalar tensor into every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already back-propagated; rebuild it before calling backward() again")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
        self._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_non_scalar():
    raise GraphError("item() on a non-scalar tensor")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    live = any(_needs_grad(p) for p in parents)
    out = Tensor(data, _parents=tuple(parents) if live else (), op=op)
    if live:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _make(x.data + y.data, (x, y),
                 lambda g: ((x, _unbroadcast(g, x.shape)), (y, _unbroadcast(g, y.shape))), "add")


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _make(x.data - y.data, (x, y),
                 lambda g: ((x, _unbroadcast(g, x.shape)), (y, -_unbroadcast(g, y.shape))), "sub")


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    return _make(x.data * y.data, (x, y),
                 lambda g: ((x, _unbroadcast(g * y.data, x.shape)), (y, _unbroadcast(g * x.data, y.shape))),
                 "mul")


def scale(x, s) -> Tensor:
    """Multiply ``x`` by a scalar, a 1x1 tensor or a per-row column vector."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.ndim == 1 and x.data.ndim == 2:
        s = reshape(s, (-1, 1))
    if s.size != 1 and (x.data.ndim == 0 or s.size != x.shape[0]) and s.shape != x.shape:
        raise ValueError(f"cannot scale {x.shape} by {s.shape}")
    return mul(x, s)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: ((x, 2.0 * x.data * g),), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: ((x, g * pos),), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: ((x, g * (1.0 - y * y)),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: ((x, g * y * (1.0 - y)),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: ((x, g * y),), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


# -- reductions and shape ops ---------------------------------------------
def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: ((x, np.broadcast_to(g, x.shape)),), "sum")


def mean_pool_rows(x) -> Tensor:
    """Column means of an ``m x n`` tensor, returned as ``1 x n``."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"mean_pool_rows expects a matrix, got {x.shape}")
    m = x.shape[0]
    return _make(x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: ((x, np.broadcast_to(g / m, x.shape)),), "mean_pool_rows")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(src)),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),), "transpose")


def concat(xs: Iterable, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    ndim = xs[0].data.ndim
    if any(x.data.ndim != ndim for x in xs):
        raise ValueError("concat inputs differ in rank")
    ax = axis % ndim
    for x in xs[1:]:
        if x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ValueError(f"concat shape mismatch: {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple((x, np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)) for i, x in enumerate(xs))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, backward, "concat")


def index(x, idx) -> Tensor:
    """Numpy-style indexing; gradients are scattered back with ``np.add.at``."""
    x = as_tensor(x)

    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return ((x, full),)

    return _make(x.data[idx], (x,), backward, "index")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None for i in items)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ np.swapaxes(b.data, -1, -2)), (b, np.swapaxes(a.data, -1, -2) @ g))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- normalisation ----------------------------------------------------------
def softmax_rows(x, mask=None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` (bool array broadcastable to ``x``) removes entries from the
    normalisation; removed entries come out as exactly 0.  A row with no
    surviving entries is all zeros.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax_rows got non-finite input")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
        zmax = np.max(np.where(mask, z, -np.inf), axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.where(mask, np.exp(z - zmax), 0.0)
        tot = e.sum(axis=-1, keepdims=True)
        y = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
    else:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, y * (g - (g * y).sum(axis=-1, keepdims=True))),)

    return _make(y, (x,), backward, "softmax")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: ((x, g - p * g.sum(axis=-1, keepdims=True)),), "log_softmax")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout.  The exact identity (same object) when not training."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: ((x, g * keep),), "dropout")


# -- recurrent cell -------------------------------------------------------
def lstm_step(params: dict, x, h, c) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.

    ``params`` holds ``w_x`` (in x 4H), ``w_h`` (H x 4H) and ``b`` (1 x 4H);
    gate blocks are ordered input, forget, candidate, output.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    hid = w_h.shape[0]
    if w_x.shape != (x.shape[-1], 4 * hid) or w_h.shape != (hid, 4 * hid) or h.shape[-1] != hid:
        raise ValueError(f"lstm shape mismatch: x{x.shape} h{h.shape} w_x{w_x.shape} w_h{w_h.shape}")
    gates = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(gates[:, 0 * hid:1 * hid])
    f = sigmoid(gates[:, 1 * hid:2 * hid])
    g = tanh(gates[:, 2 * hid:3 * hid])
    o = sigmoid(gates[:, 3 * hid:4 * hid])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# -- checking -------------------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int = 200, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current parameter values each call.
    Tensors with more than ``max_coords`` entries are checked on a random
    subsample.  The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            fp = f().item()
            flat[j] = orig - eps
            fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            a = ga.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))
