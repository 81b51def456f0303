"""Dense tensors with tape-based reverse-mode differentiation.

Every op whose output depends on something trainable appends one node to the
current :class:`ComputeGraph` (one per thread). :func:`backward` replays that
tape once, in reverse, and then marks it consumed; the next recorded op opens
a fresh graph. Gradients land in ``Parameter.grad`` with ``+=`` so several
backward passes accumulate.

Ops never record anything when none of their inputs require a gradient,
which is what makes frozen prefixes of a network free on the backward pass.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


class Parameter(Tensor):
    """A leaf tensor owned by a model.

    ``grad`` always exists with the value's shape. ``trainable`` decides
    whether backward passes touch it at all; frozen parameters keep an exactly
    zero gradient.
    """

    __slots__ = ("grad", "layer_id", "name")

    def __init__(self, data, trainable: bool = False, layer_id: int | None = None,
                 name: str = "", dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.data = np.ascontiguousarray(self.data)
        self.grad = np.zeros_like(self.data)
        self.layer_id = layer_id
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return (f"Parameter({self.name!r}, shape={self.shape}, "
                f"trainable={self.trainable}, layer_id={self.layer_id})")


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class ComputeGraph:
    """Ordered record of executed ops, replayed once by :func:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _current_graph() -> ComputeGraph:
    graph = getattr(_state, "graph", None)
    if graph is None or graph.consumed:
        graph = ComputeGraph()
        _state.graph = graph
    return graph


def grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _record(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray, tuple[bool, ...]], tuple]) -> Tensor:
    out = Tensor(data)
    if not grad_enabled() or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    graph = _current_graph()
    out._graph = graph
    graph.nodes.append(_Node(out, tuple(parents), backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every trainable Parameter reached."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        if isinstance(loss, Parameter):
            if loss.trainable:
                loss.grad += 1.0
            return
        raise GraphError("loss was not produced by any recorded op")
    if graph.consumed:
        raise GraphError("graph already consumed by an earlier backward call")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        parent_grads = node.backward(g, needs)
        for p, need, pg in zip(node.parents, needs, parent_grads):
            if not need or pg is None:
                continue
            if isinstance(p, Parameter):
                p.grad += pg
            else:
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    graph.consumed = True
    graph.nodes.clear()
    if getattr(_state, "graph", None) is graph:
        _state.graph = None


# --------------------------------------------------------------------------
# broadcasting helpers (leading dimensions only)
# --------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: unsupported broadcast between {sa} and {sb} "
                     "(only leading-dimension broadcast is supported)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[..., k, n]; b may be 2-D and shared across a's batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g, needs):
        ga = g @ np.swapaxes(B, -1, -2) if needs[0] else None
        gb = None
        if needs[1]:
            if B.ndim == 2:
                k, n = A.shape[-1], g.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record(A @ B, (a, b), bw)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x[..., d_in] @ weight[d_out, d_in]^T."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    X, W = x.data, weight.data

    def bw(g, needs):
        gx = g @ W if needs[0] else None
        gw = None
        if needs[1]:
            gw = g.reshape(-1, g.shape[-1]).T @ X.reshape(-1, X.shape[-1])
        return gx, gw

    return _record(X @ W.T, (x, weight), bw)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None,
                _reduce_to(g, sb) if needs[1] else None)

    return _record(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def bw(g, needs):
        return (_reduce_to(g * B, A.shape) if needs[0] else None,
                _reduce_to(g * A, B.shape) if needs[1] else None)

    return _record(A * B, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g, needs):
        return (g * c,)

    return _record(a.data * c, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    X = a.data
    flat = np.ascontiguousarray(X).reshape(-1)

    def bw(g, needs):
        return (kernels.gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1)).reshape(X.shape),)

    return _record(kernels.gelu_fwd(flat).reshape(X.shape), (a,), bw)


def silu(a: Tensor) -> Tensor:
    X = a.data
    sig = 1.0 / (1.0 + np.exp(-X))

    def bw(g, needs):
        return (g * sig * (1.0 + X * (1.0 - sig)),)

    return _record(X * sig, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def bw(g, needs):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _record(np.asarray(a.data.mean()), (a,), bw)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "gelu": gelu,
    "silu": silu,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, mul, scale (b is a float), gelu, silu."""
    if op_kind == "scale":
        return scale(_as_tensor(a), float(b))
    fn = _ELEMENTWISE.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if op_kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(_as_tensor(a))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match input {x.shape}")
    X = np.ascontiguousarray(x.data).reshape(-1, d)
    G = gain.data
    y, inv = kernels.rmsnorm_fwd(X, G, eps)

    def bw(g, needs):
        dx, dg = kernels.rmsnorm_bwd(np.ascontiguousarray(g).reshape(-1, d), X, G, inv)
        return (dx.reshape(x.shape) if needs[0] else None, dg if needs[1] else None)

    return _record(y.reshape(x.shape), (x, gain), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def bw(g, needs):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention on [batch, seq, d_model] inputs."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    bsz, t, d = q.shape
    if d % n_heads:
        raise ShapeError(f"attention: d_model {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    sc = 1.0 / math.sqrt(hd)

    def split(a):
        return np.ascontiguousarray(a.reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3))

    Q, K, V = split(q.data), split(k.data), split(v.data)
    S = (Q @ K.transpose(0, 1, 3, 2)) * sc
    P = kernels.causal_softmax_fwd(S.reshape(bsz * n_heads, t, t)).reshape(S.shape)
    O = P @ V

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(bsz, t, d)

    def bw(g, needs):
        G = split(g)
        gv = merge(P.transpose(0, 1, 3, 2) @ G) if needs[2] else None
        gq = gk = None
        if needs[0] or needs[1]:
            dP = G @ V.transpose(0, 1, 3, 2)
            dS = kernels.causal_softmax_bwd(
                P.reshape(-1, t, t), np.ascontiguousarray(dP).reshape(-1, t, t)
            ).reshape(P.shape) * sc
            if needs[0]:
                gq = merge(dS @ K)
            if needs[1]:
                gk = merge(dS.transpose(0, 1, 3, 2) @ Q)
        return gq, gk, gv

    return _record(merge(O), (q, k, v), bw)


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean token NLL over positions whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross entropy: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[-1]
    flat_t = targets.reshape(-1)
    bad = (flat_t != ignore_index) & ((flat_t < 0) | (flat_t >= vocab))
    if bad.any():
        raise ValueError(f"target index outside [0, {vocab}) and not ignore_index")
    Z = np.ascontiguousarray(logits.data).reshape(-1, vocab)
    want = grad_enabled() and logits.requires_grad
    total, count, dz = kernels.cross_entropy(Z, flat_t, ignore_index, want)
    if count == 0:
        raise ValueError("cross entropy: every target is ignore_index")

    def bw(g, needs):
        return ((dz * (g / count)).reshape(logits.shape),)

    return _record(np.asarray(total / count, dtype=logits.dtype), (logits,), bw)


def set_trainable(params: Iterable[Parameter], layer_ids: Iterable[int], flag: bool,
                  known_layers: Iterable[int] | None = None) -> None:
    """Set ``trainable = flag`` on every parameter tagged with one of ``layer_ids``."""
    params = list(params)
    wanted = set(layer_ids)
    known = set(known_layers) if known_layers is not None else {
        p.layer_id for p in params if p.layer_id is not None}
    unknown = wanted - known
    if unknown:
        raise KeyError(f"unknown layer id(s): {sorted(unknown)}")
    for p in params:
        if p.layer_id in wanted:
            p.trainable = flag
