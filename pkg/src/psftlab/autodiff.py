"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Graph` (``with graph: ...``) are
appended to its tape when any input needs a gradient. :func:`backward` walks
the tape once in reverse and accumulates into the ``grad`` of leaf tensors,
then resets the graph. Outside a graph nothing is recorded, so the same model
code doubles as a no-grad evaluation path.

Broadcasting is limited to scalars and to one operand whose shape is a
suffix of the other's (a bias over leading batch dimensions).
"""

from __future__ import annotations

import threading

import numpy as np

from psftlab import kernels


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DetachedError(AutodiffError):
    pass


_state = threading.local()


def _active_graph():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class no_grad:
    """Suspends recording inside an enclosing graph."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class Graph:
    """Append-only tape of operation records, consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self.generation += 1

    def _record(self, op, inputs, backward):
        self.nodes.append(_Node(op, inputs, backward))
        return len(self.nodes) - 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_graph", "_gen")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._graph = None
        self._gen = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        kind = "leaf" if self.node_id is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {kind})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _live_node(self):
        if self.node_id is None or self._graph is None:
            return False
        return self._graph.generation == self._gen

    def needs_grad(self):
        return self.requires_grad or self._live_node()

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(c))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, inputs, backward) -> Tensor:
    out = Tensor(data)
    graph = _active_graph()
    if graph is None or not any(t.needs_grad() for t in inputs):
        return out
    for t in inputs:
        if t._live_node() and t._graph is not graph:
            raise AutodiffError("operands belong to different graphs")
    out.node_id = graph._record(op, inputs, backward)
    out._graph = graph
    out._gen = graph.generation
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._live_node() or loss._graph is not graph:
        raise DetachedError("loss is not attached to this graph")
    grads = {loss.node_id: np.ones((), dtype=np.float64)}
    nodes = graph.nodes
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None:
                continue
            if inp._live_node():
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
            elif inp.requires_grad:
                inp.grad = np.array(ig, dtype=np.float64) if inp.grad is None else inp.grad + ig
    graph.reset()


# --- broadcasting helpers -------------------------------------------------

def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make("relu", np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def gelu(a) -> Tensor:
    """tanh approximation."""
    a = as_tensor(a)
    shape = a.shape
    x = np.ascontiguousarray(a.data).reshape(-1)
    out, t = kernels.gelu(x)

    def bw(g):
        return (kernels.gelu_backward(x, t, np.ascontiguousarray(g).reshape(-1)).reshape(shape),)

    return _make("gelu", out.reshape(shape), (a,), bw)


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = np.exp(-np.logaddexp(0.0, x))  # sigmoid(-x)
    return _make("log_sigmoid", out, (a,), lambda g: (g * sig_neg,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where lo <= a <= hi."""
    a = as_tensor(a)
    if lo > hi:
        raise ValueError("clip needs lo <= hi")
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make("minimum", out, (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# --- reductions / shape ---------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make("sum", a.data.sum(axis=ax), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def pad_front(a, axis: int = 1) -> Tensor:
    """Prepend one zero slice along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[ax] = (1, 0)
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(1, None)
    sl = tuple(sl)
    return _make("pad_front", np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# --- linear algebra / indexing -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if b.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def gather(a, idx) -> Tensor:
    """out[...] = a[..., idx[...]] along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} vs {a.shape}")
    v = a.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError("gather index out of range")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make("gather", out, (a,), bw)


def embedding(weight, idx) -> Tensor:
    """Row lookup: out[..., :] = weight[idx[...], :]."""
    weight = as_tensor(weight)
    idx = np.asarray(idx, dtype=np.int64)
    n = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("embedding index out of range")
    shape = weight.shape

    def bw(g):
        gw = np.zeros(shape)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _make("embedding", weight.data[idx], (weight,), bw)


# --- kernel-backed row ops ------------------------------------------------

def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("log_softmax needs a non-empty last dimension")
    shape = a.shape
    out = kernels.log_softmax(_rows(a.data))

    def bw(g):
        return (kernels.log_softmax_backward(out, _rows(g)).reshape(shape),)

    return _make("log_softmax", out.reshape(shape), (a,), bw)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    shape = a.shape
    p = kernels.softmax(_rows(a.data))

    def bw(g):
        return (kernels.softmax_backward(p, _rows(g)).reshape(shape),)

    return _make("softmax", p.reshape(shape), (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm affine params must match the last dimension")
    shape = a.shape
    gd = np.ascontiguousarray(gamma.data)
    y, xhat, rstd = kernels.layer_norm(_rows(a.data), gd, np.ascontiguousarray(beta.data), eps)

    def bw(g):
        gx, dg, db = kernels.layer_norm_backward(_rows(g), xhat, rstd, gd)
        return gx.reshape(shape), dg, db

    return _make("layer_norm", y.reshape(shape), (a, gamma, beta), bw)
