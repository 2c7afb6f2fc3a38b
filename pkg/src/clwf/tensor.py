"""Dense float64 tensors with a small taped reverse-mode autodiff.

A :class:`Graph` is opened around a forward pass; every primitive applied to
a tensor that requires gradients is appended to it.  :func:`backward` then
walks the tape in reverse.  The tape is rebuilt on every forward pass.

Broadcasting is limited to adding (or multiplying) a length-``n`` vector over
the rows of an ``[m, n]`` matrix.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError, DimensionError, GraphStateError, NumericError

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "PRIMITIVES",
    "primitive_forward",
    "backward",
    "finite_difference_grad",
    "matmul",
    "hadamard",
    "add",
    "outer",
    "tanh",
    "relu",
    "mean_pool",
    "log_softmax_nll",
    "transpose",
    "total",
    "scale",
    "seq_attention",
]


class Tensor:
    """Row-major float64 array, optionally a gradient leaf."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_producer", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._producer: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._producer = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the primitives.
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return hadamard(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self) -> Tensor:
        return total(self)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any] = field(default_factory=dict)
    index: int = 0


_local = threading.local()


def _active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of primitive applications.

    Usable as a context manager; while active, primitives record into it.
    Graphs are per-thread.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._in_backward = False

    def __enter__(self) -> Graph:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, attrs: dict[str, Any]) -> Node:
        if self._in_backward:
            raise GraphStateError("graph mutated during backward")
        node = Node(kind, inputs, output, attrs, len(self.nodes))
        self.nodes.append(node)
        output._producer = node
        return node


# --------------------------------------------------------------------------
# primitive rules: forward(arrays, attrs) -> array; backward(g, arrays, out, attrs) -> grads


def _is_row_bias(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]


def _check_elementwise(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not _is_row_bias(a, b):
        raise DimensionError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def _reduce_like(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    return g.sum(axis=0) if g.shape != like.shape else g


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    return a @ b


def _matmul_bwd(g, xs, out, attrs):
    a, b = xs
    return g @ b.T, a.T @ g


def _hadamard_fwd(xs, attrs):
    _check_elementwise("hadamard", *xs)
    return xs[0] * xs[1]


def _hadamard_bwd(g, xs, out, attrs):
    a, b = xs
    return g * b, _reduce_like(g * a, b)


def _add_fwd(xs, attrs):
    _check_elementwise("add", *xs)
    return xs[0] + xs[1]


def _add_bwd(g, xs, out, attrs):
    return g, _reduce_like(g, xs[1])


def _outer_fwd(xs, attrs):
    u, v = xs
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError(f"outer: expected vectors, got {list(u.shape)} and {list(v.shape)}")
    return np.outer(u, v)


def _outer_bwd(g, xs, out, attrs):
    u, v = xs
    return g @ v, g.T @ u


def _tanh_fwd(xs, attrs):
    return np.tanh(xs[0])


def _tanh_bwd(g, xs, out, attrs):
    return (g * (1.0 - out * out),)


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0)


def _relu_bwd(g, xs, out, attrs):
    return (g * (xs[0] > 0.0),)


def _mean_pool_fwd(xs, attrs):
    x = xs[0]
    seq_len = attrs["seq_len"]
    if x.ndim != 2 or seq_len < 1 or x.shape[0] % seq_len:
        raise DimensionError(f"mean_pool: shape {list(x.shape)} is not a stack of length-{seq_len} sequences")
    b = x.shape[0] // seq_len
    return x.reshape(b, seq_len, x.shape[1]).mean(axis=1)


def _mean_pool_bwd(g, xs, out, attrs):
    seq_len = attrs["seq_len"]
    return (np.repeat(g / seq_len, seq_len, axis=0),)


def _as_logit_rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(1, -1) if x.ndim == 1 else x


def _log_softmax_nll_fwd(xs, attrs):
    logits = _as_logit_rows(xs[0])
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"log_softmax_nll: logits {list(xs[0].shape)} do not match labels {list(labels.shape)}"
        )
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError(f"log_softmax_nll: labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.size), labels]
    return np.asarray((logz - picked).mean())


def _log_softmax_nll_bwd(g, xs, out, attrs):
    logits = _as_logit_rows(xs[0])
    labels = attrs["labels"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(labels.size), labels] -= 1.0
    return ((g / labels.size) * p.reshape(xs[0].shape),)


def _transpose_fwd(xs, attrs):
    if xs[0].ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {list(xs[0].shape)}")
    return np.ascontiguousarray(xs[0].T)


def _transpose_bwd(g, xs, out, attrs):
    return (g.T,)


def _total_fwd(xs, attrs):
    return np.asarray(xs[0].sum())


def _total_bwd(g, xs, out, attrs):
    return (np.full(xs[0].shape, float(g)),)


def _scale_fwd(xs, attrs):
    return xs[0] * attrs["factor"]


def _scale_bwd(g, xs, out, attrs):
    return (g * attrs["factor"],)


def _attention_split(xs, attrs):
    seq_len = attrs["seq_len"]
    q, k, v = xs
    if not (q.shape == k.shape == v.shape) or q.ndim != 2 or q.shape[0] % seq_len:
        raise DimensionError(
            f"seq_attention: shapes {[list(x.shape) for x in xs]} do not form length-{seq_len} sequences"
        )
    b = q.shape[0] // seq_len
    return [x.reshape(b, seq_len, x.shape[1]) for x in xs]


def _attention_probs(q3, k3):
    s = np.einsum("bid,bjd->bij", q3, k3) / np.sqrt(q3.shape[2])
    s -= s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    return p


def _seq_attention_fwd(xs, attrs):
    q3, k3, v3 = _attention_split(xs, attrs)
    p = _attention_probs(q3, k3)
    return np.einsum("bij,bjd->bid", p, v3).reshape(xs[0].shape)


def _seq_attention_bwd(g, xs, out, attrs):
    q3, k3, v3 = _attention_split(xs, attrs)
    p = _attention_probs(q3, k3)
    g3 = g.reshape(q3.shape)
    dv = np.einsum("bij,bid->bjd", p, g3)
    dp = np.einsum("bid,bjd->bij", g3, v3)
    ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) / np.sqrt(q3.shape[2])
    dq = np.einsum("bij,bjd->bid", ds, k3)
    dk = np.einsum("bij,bid->bjd", ds, q3)
    shape = xs[0].shape
    return dq.reshape(shape), dk.reshape(shape), dv.reshape(shape)


PRIMITIVES: dict[str, tuple[Callable, Callable, int]] = {
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "hadamard": (_hadamard_fwd, _hadamard_bwd, 2),
    "add": (_add_fwd, _add_bwd, 2),
    "outer": (_outer_fwd, _outer_bwd, 2),
    "tanh": (_tanh_fwd, _tanh_bwd, 1),
    "relu": (_relu_fwd, _relu_bwd, 1),
    "mean_pool": (_mean_pool_fwd, _mean_pool_bwd, 1),
    "log_softmax_nll": (_log_softmax_nll_fwd, _log_softmax_nll_bwd, 1),
    "transpose": (_transpose_fwd, _transpose_bwd, 1),
    "sum": (_total_fwd, _total_bwd, 1),
    "scale": (_scale_fwd, _scale_bwd, 1),
    "seq_attention": (_seq_attention_fwd, _seq_attention_bwd, 3),
}


# Primitives that can map a non-finite input to a finite output; every other
# primitive propagates NaN/Inf, so checking its output suffices.
_SATURATING = frozenset({"tanh", "relu", "seq_attention", "log_softmax_nll"})


def _check_inputs(kind: str, inputs: Sequence[Tensor]) -> None:
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NumericError(f"{kind}: non-finite input {t.name or list(t.shape)}")


def primitive_forward(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Apply primitive ``kind`` and record it on the active graph if needed."""
    try:
        fwd, _, arity = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if len(inputs) != arity:
        raise ContractError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    if kind in _SATURATING:
        _check_inputs(kind, inputs)
    if "labels" in attrs:
        attrs["labels"] = np.asarray(attrs["labels"], dtype=np.int64).reshape(-1)
    out_arr = fwd(arrays, attrs)
    if not np.isfinite(out_arr).all():
        _check_inputs(kind, inputs)
        raise NumericError(f"{kind}: non-finite output")
    needs_grad = any(t.requires_grad for t in inputs)
    graph = _active_graph()
    out = Tensor._wrap(out_arr, needs_grad and graph is not None)
    if out.requires_grad:
        graph.record(kind, tuple(inputs), out, attrs)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("matmul", (a, b))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("hadamard", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("add", (a, b))


def outer(u: Tensor, v: Tensor) -> Tensor:
    return primitive_forward("outer", (u, v))


def tanh(x: Tensor) -> Tensor:
    return primitive_forward("tanh", (x,))


def relu(x: Tensor) -> Tensor:
    return primitive_forward("relu", (x,))


def mean_pool(x: Tensor, seq_len: int) -> Tensor:
    """Average each consecutive block of ``seq_len`` rows."""
    return primitive_forward("mean_pool", (x,), seq_len=int(seq_len))


def log_softmax_nll(logits: Tensor, labels: Iterable[int] | int) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    return primitive_forward("log_softmax_nll", (logits,), labels=np.atleast_1d(labels))


def transpose(x: Tensor) -> Tensor:
    return primitive_forward("transpose", (x,))


def total(x: Tensor) -> Tensor:
    return primitive_forward("sum", (x,))


def scale(x: Tensor, factor: float) -> Tensor:
    return primitive_forward("scale", (x,), factor=float(factor))


def seq_attention(q: Tensor, k: Tensor, v: Tensor, seq_len: int) -> Tensor:
    """Single-head scaled dot-product attention within each length-``seq_len`` sequence."""
    return primitive_forward("seq_attention", (q, k, v), seq_len=int(seq_len))


def backward(graph: Graph, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate gradients of scalar ``loss`` to every leaf on ``graph``.

    Returns a mapping from leaf tensor to gradient array and also stores the
    gradient on ``leaf.grad``.  Tensors in ``params`` that the loss does not
    depend on receive zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not graph.nodes or graph.nodes[-1].output is not loss:
        raise ContractError("loss is not the final node of the graph")
    n_nodes = len(graph.nodes)
    graph._in_backward = True
    try:
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _, bwd, _ = PRIMITIVES[node.kind]
            in_grads = bwd(g, [t.data for t in node.inputs], node.output.data, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._producer is None:
                    leaves[key] = t
        if len(graph.nodes) != n_nodes:
            raise GraphStateError("graph mutated during backward")
    finally:
        graph._in_backward = False

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.ascontiguousarray(grads.get(key, np.zeros(leaf.shape)), dtype=np.float64)
        leaf.grad = g
        result[leaf] = g
    for p in params or ():
        if p not in result:
            p.grad = np.zeros(p.shape)
            result[p] = p.grad
    return result


def finite_difference_grad(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``f`` receives the list of arrays (perturbed in place and restored).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    out = []
    for arr in work:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(work))
            flat[j] = orig - eps
            lo = float(f(work))
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("finite_difference_grad: f returned a non-finite value")
            gflat[j] = (hi - lo) / (2.0 * eps)
        out.append(g)
    return out
