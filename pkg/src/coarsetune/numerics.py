"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  With no
tape active nothing is recorded, which is how inference runs: the outputs are
plain values and the weights are never touched.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0]
"""

import threading

import numpy as np

from . import _accel

IGNORE_INDEX = -100
LN_EPS = 1e-12


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class GraphError(RuntimeError):
    pass


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations in execution order; that order is topological."""

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, parents, backward_fn):
        if self._done:
            raise GraphError("tape already consumed by backward(); call reset()")
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward_fn))

    def reset(self):
        self.nodes = []
        self._done = False

    def backward(self, loss):
        if self._done:
            raise GraphError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        nid = loss.node_id
        if nid is None or nid >= len(self.nodes) or self.nodes[nid].out is not loss:
            raise GraphError("loss was not produced on this tape")
        self._done = True
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes[: nid + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.node_id is None or p.node_id >= len(self.nodes) or self.nodes[p.node_id].out is not p:
                    leaves[key] = p
        for key, p in leaves.items():
            g = grads[key]
            _check_finite(g, f"gradient of {p.name or 'leaf'}")
            p.grad = g.copy() if p.grad is None else p.grad + g


def _result(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a):
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    y, t = _accel.gelu_forward(a.data)
    x = a.data
    return _result(y, (a,), lambda g: (_accel.gelu_backward(x, t, g),))


_UNARY = {"gelu": gelu, "tanh": tanh}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op, a, b=None):
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](as_tensor(a))
    if op in _BINARY:
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# shape and linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), back)


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a):
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def embedding(weight, ids):
    """Gather rows of ``weight`` [V, H] at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range for vocabulary of size {v}")

    def back(g):
        gw = np.zeros_like(weight.data)
        _accel.scatter_add_rows(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), back)


def take(a, index):
    """Advanced-index ``a`` along its leading axes, e.g. ``(rows, cols)``."""
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(a.data[index], (a,), back)


def dropout(a, rate, rng):
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(a):
    """Softmax over the last axis."""
    shp = a.shape
    y = _accel.softmax_rows(a.data.reshape(-1, shp[-1])).reshape(shp)
    return _result(y, (a,), lambda g: (
        _accel.softmax_rows_backward(y.reshape(-1, shp[-1]), g.reshape(-1, shp[-1])).reshape(shp),))


def layer_norm(x, gain, bias, eps=LN_EPS):
    h = x.shape[-1]
    if h == 0:
        raise ValueError("layer_norm over an empty last dimension")
    if gain.shape != (h,) or bias.shape != (h,):
        raise ValueError(f"layer_norm parameter shape mismatch: {gain.shape}, {bias.shape} vs H={h}")
    shp = x.shape
    y, xhat, rstd = _accel.layer_norm_forward(x.data.reshape(-1, h), gain.data, bias.data, eps)

    def back(g):
        gx, gg, gb = _accel.layer_norm_backward(g.reshape(-1, h), xhat, rstd, gain.data)
        return gx.reshape(shp), gg, gb

    return _result(y.reshape(shp), (x, gain, bias), back)


def softmax_cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Mean NLL over rows whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ValueError(f"logits {logits.shape} do not match {targets.size} targets")
    v = logits.shape[1]
    kept = targets[targets != ignore_index]
    if kept.size == 0:
        raise ValueError("every row is ignored; the mean loss is undefined")
    if kept.min() < 0 or kept.max() >= v:
        raise IndexError(f"target index out of range for {v} classes")
    total, count, probs = _accel.cross_entropy(logits.data, targets, ignore_index)
    scale_ = 1.0 / count
    return _result(np.array(total / count), (logits,), lambda g: (
        _accel.cross_entropy_backward(probs, targets, ignore_index, float(g) * scale_),))


def softmax_np(x):
    """Plain softmax over the last axis for inference-time arrays."""
    x = np.asarray(x, dtype=np.float64)
    return _accel.softmax_rows(x.reshape(-1, x.shape[-1])).reshape(x.shape)
