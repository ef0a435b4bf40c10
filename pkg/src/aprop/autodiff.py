"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations record onto an append-only tape (:class:`Graph`). Every backward
rule is itself written in terms of recorded operations, so gradients returned
by ``backward(..., create_graph=True)`` carry graph nodes and can be
differentiated again -- this is what makes second-order training of backward
overrides possible.

Non-linear activation nodes (relu, tanh, sigmoid, softmax) save their input
feature tensor and can carry a per-instance backward override registered via
:func:`register_override`; the override replaces the analytic derivative rule
for that node during backprop.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "as_tensor",
    "no_grad",
    "checked_mode",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "absolute",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "reduce_sum",
    "mean",
    "reduce_max",
    "reduce_min",
    "concat",
    "slice_",
    "embed",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "nonlinear",
    "im2col",
    "col2im",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "backward",
    "seed_backward",
    "register_override",
    "NONLINEAR_KINDS",
]

NONLINEAR_KINDS = ("relu", "tanh", "sigmoid", "softmax_lastdim")

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


def _checked() -> bool:
    return getattr(_state, "checked", False)


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _recording()
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class checked_mode:
    """Context manager that enables NaN/Inf and zero-divisor checks."""

    def __init__(self, enabled: bool = True):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _checked()
        _state.checked = self._enabled
        return self

    def __exit__(self, *exc):
        _state.checked = self._prev
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _checked() and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class Node:
    """One recorded operation (or leaf) on a graph tape."""

    __slots__ = ("id", "op", "graph", "parents", "backward_rule",
                 "saved_input", "ref", "override_id")

    def __init__(self, node_id: int, op: str, graph: "Graph",
                 parents: tuple, backward_rule):
        self.id = node_id
        self.op = op
        self.graph = graph
        # parent node ids aligned with the op's tensor inputs; None marks a
        # constant input that receives no gradient
        self.parents = parents
        self.backward_rule = backward_rule  # None for leaves
        self.saved_input = None  # input feature Tensor (non-linear ops only)
        self.ref = None          # optional reference feature Tensor
        self.override_id = None

    @property
    def is_leaf(self) -> bool:
        return self.backward_rule is None

    @property
    def is_nonlinear(self) -> bool:
        return self.op in NONLINEAR_KINDS


class Graph:
    """Append-only tape of nodes in topological order.

    Node ids are list indices, so inputs always precede consumers. A backward
    pass with ``create_graph=True`` appends the nodes of the gradient
    computation to the same tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.override_table: dict[int, Callable] = {}
        self._next_override = 0

    def _append(self, op: str, parents: tuple, backward_rule) -> Node:
        node = Node(len(self.nodes), op, self, parents, backward_rule)
        self.nodes.append(node)
        return node

    def register_override(self, node: Union[Node, int], rule: Callable) -> int:
        """Attach a backward rule to one non-linear node instance.

        ``rule(grad_out, feature, reference)`` is called in place of the
        analytic derivative during subsequent backward passes over this graph
        and must return the gradient with respect to the node's input.
        """
        if isinstance(node, int):
            node = self.nodes[node]
        if not node.is_nonlinear:
            raise ValueError(
                f"backward overrides require a non-linear node, got '{node.op}'")
        oid = self._next_override
        self._next_override += 1
        self.override_table[oid] = rule
        node.override_id = oid
        return oid


class Tensor:
    """Dense float64 array, optionally attached to a computation graph."""

    __slots__ = ("data", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.node: Optional[Node] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph attachment."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # reductions / views ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# recording machinery
# ---------------------------------------------------------------------------

def _merge_graphs(dst: Graph, src: Graph) -> None:
    """Append `src`'s tape onto `dst`, remapping node and override ids.

    The two graphs are disjoint, so appending the whole block preserves
    topological ordering of ids.
    """
    base = len(dst.nodes)
    off = dst._next_override
    for node in src.nodes:
        node.id += base
        node.graph = dst
        node.parents = tuple(None if p is None else p + base for p in node.parents)
        if node.override_id is not None:
            node.override_id += off
    dst.nodes.extend(src.nodes)
    for oid, rule in src.override_table.items():
        dst.override_table[oid + off] = rule
    dst._next_override += src._next_override
    src.nodes = []
    src.override_table = {}


def _resolve_graph(inputs: Sequence[Tensor]) -> Optional[Graph]:
    graphs = []
    for t in inputs:
        if t.node is not None and t.node.graph not in graphs:
            graphs.append(t.node.graph)
    if not graphs:
        return None
    main = max(graphs, key=lambda g: len(g.nodes))
    for g in graphs:
        if g is not main:
            _merge_graphs(main, g)
    return main


def _leaf_id(graph: Graph, t: Tensor) -> Optional[int]:
    """Node id of `t` in `graph`, attaching a leaf node when it requires grad."""
    if t.node is not None:
        return t.node.id
    if t.requires_grad:
        t.node = graph._append("leaf", (), None)
        return t.node.id
    return None


def _apply(op: str, inputs: tuple, out_data, backward_rule,
           nonlinear_src: Optional[Tensor] = None) -> Tensor:
    out_data = np.asarray(out_data, dtype=np.float64)
    _check_finite(out_data, f"result of '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.node = None
    out.requires_grad = False
    if not _recording():
        return out
    if not any(t.node is not None or t.requires_grad for t in inputs):
        return out
    graph = _resolve_graph(inputs)
    if graph is None:
        graph = Graph()
    parents = tuple(_leaf_id(graph, t) for t in inputs)
    node = graph._append(op, parents, backward_rule)
    if nonlinear_src is not None:
        node.saved_input = nonlinear_src
    out.node = node
    return out


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g, needs):
        return (_sum_to(g, a.shape) if needs[0] else None,
                _sum_to(g, b.shape) if needs[1] else None)

    return _apply("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g, needs):
        return (_sum_to(g, a.shape) if needs[0] else None,
                _sum_to(neg(g), b.shape) if needs[1] else None)

    return _apply("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g, needs):
        return (_sum_to(mul(g, b), a.shape) if needs[0] else None,
                _sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _apply("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if _checked() and np.any(b.data == 0.0):
        raise ZeroDivisionError("division by zero")
    out = a.data / b.data

    def bwd(g, needs):
        ga = _sum_to(div(g, b), a.shape) if needs[0] else None
        gb = (_sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
              if needs[1] else None)
        return (ga, gb)

    return _apply("div", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, needs):
        return (neg(g),)

    return _apply("neg", (a,), -a.data, bwd)


def power(a, p) -> Tensor:
    """Elementwise a**p for a scalar exponent p."""
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def bwd(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _apply("pow", (a,), out, bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    cell = []

    def bwd(g, needs):
        return (mul(g, cell[0]),)

    out = _apply("exp", (a,), np.exp(a.data), bwd)
    cell.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, needs):
        return (div(g, a),)

    return _apply("log", (a,), np.log(a.data), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))

    def bwd(g, needs):
        return (mul(g, sign),)

    return _apply("abs", (a,), np.abs(a.data), bwd)


# ---------------------------------------------------------------------------
# non-linear activations (override-capable instances)
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = Tensor((a.data > 0).astype(np.float64))

    def bwd(g, needs):
        return (mul(g, gate),)

    return _apply("relu", (a,), np.maximum(a.data, 0.0), bwd, nonlinear_src=a)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    cell = []

    def bwd(g, needs):
        out = cell[0]
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _apply("tanh", (a,), np.tanh(a.data), bwd, nonlinear_src=a)
    cell.append(out)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    cell = []

    def bwd(g, needs):
        out = cell[0]
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _apply("sigmoid", (a,), out_data, bwd, nonlinear_src=a)
    cell.append(out)
    return out


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    cell = []

    def bwd(g, needs):
        out = cell[0]
        s = reduce_sum(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, sub(g, s)),)

    out = _apply("softmax_lastdim", (a,), out_data, bwd, nonlinear_src=a)
    cell.append(out)
    return out


def log_softmax_lastdim(a) -> Tensor:
    """Numerically stable log-softmax over the last dimension."""
    a = as_tensor(a)
    # softmax is invariant to subtracting any fixed constant, so treating the
    # per-row max as a constant leaves value and all derivatives exact
    c = Tensor(a.data.max(axis=-1, keepdims=True))
    z = sub(a, c)
    lse = log(reduce_sum(exp(z), axis=-1, keepdims=True))
    return sub(z, lse)


def nonlinear(x, kind: str) -> Tensor:
    """Apply one of the supported non-linear activations by name."""
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_lastdim":
        return softmax_lastdim(x)
    raise ValueError(f"unknown non-linearity '{kind}'")


# ---------------------------------------------------------------------------
# shape / linear-algebra ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return (ga, gb)

    return _apply("matmul", (a, b), out, bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(ax) for ax in axes)
    inv = tuple(np.argsort(axes))

    def bwd(g, needs):
        return (transpose(g, inv),)

    return _apply("transpose", (a,), np.transpose(a.data, axes), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    src_shape = a.shape

    def bwd(g, needs):
        return (reshape(g, src_shape),)

    return _apply("reshape", (a,), out, bwd)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape)

    def bwd(g, needs):
        return (_sum_to(g, a.shape),)

    return _apply("broadcast", (a,), out, bwd)


def _norm_axes(axis, ndim) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src_shape = a.shape
    if axes is None:
        kept = (1,) * a.ndim
    else:
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def bwd(g, needs):
        gk = g if g.shape == kept else reshape(g, kept)
        return (broadcast_to(gk, src_shape),)

    return _apply("sum", (a,), out, bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if axes is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the first (lowest-index) maximum."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)
    src_shape = a.shape
    if axes is None:
        kept = (1,) * a.ndim
        flat_idx = int(a.data.argmax())
        gate = np.zeros(a.size)
        gate[flat_idx] = 1.0
        gate = gate.reshape(src_shape)
    else:
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
        # move reduced axes last, argmax over the flattened tail
        perm = [i for i in range(a.ndim) if i not in axes] + list(axes)
        moved = np.transpose(a.data, perm)
        lead = moved.shape[: a.ndim - len(axes)]
        flat = moved.reshape(lead + (-1,))
        idx = flat.argmax(axis=-1)
        gate_flat = np.zeros_like(flat)
        np.put_along_axis(gate_flat, idx[..., None], 1.0, axis=-1)
        gate = np.transpose(gate_flat.reshape(moved.shape), np.argsort(perm))
    gate_t = Tensor(gate)

    def bwd(g, needs):
        gk = g if g.shape == kept else reshape(g, kept)
        return (mul(broadcast_to(gk, src_shape), gate_t),)

    return _apply("max", (a,), out, bwd)


def reduce_min(a, axis=None, keepdims=False) -> Tensor:
    return neg(reduce_max(neg(a), axis=axis, keepdims=keepdims))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of an empty sequence")
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g, needs):
        grads = []
        start = 0
        for i, n in enumerate(sizes):
            if needs[i]:
                key = (slice(None),) * axis + (slice(start, start + n),)
                grads.append(slice_(g, key))
            else:
                grads.append(None)
            start += n
        return tuple(grads)

    return _apply("concat", ts, out, bwd)


def slice_(a, key) -> Tensor:
    """Basic indexing (ints and slices); the adjoint is :func:`embed`."""
    a = as_tensor(a)
    out = a.data[key]
    src_shape = a.shape

    def bwd(g, needs):
        return (embed(g, src_shape, key),)

    return _apply("slice", (a,), out, bwd)


def embed(a, shape, key) -> Tensor:
    """Place `a` into a zero tensor of `shape` at `key` (adjoint of slice)."""
    a = as_tensor(a)
    out = np.zeros(shape, dtype=np.float64)
    out[key] = a.data

    def bwd(g, needs):
        return (slice_(g, key),)

    return _apply("embed", (a,), out, bwd)


# ---------------------------------------------------------------------------
# convolution / pooling building blocks
# ---------------------------------------------------------------------------

def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def im2col(x, kernel, stride=1, padding=0) -> Tensor:
    """Sliding patches of an NCHW tensor, shaped (N, C, KH, KW, OH, OW)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("im2col expects an NCHW tensor")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    hw = (h, w)

    def bwd(g, needs):
        return (col2im(g, hw, kernel, stride, padding),)

    return _apply("im2col", (x,), cols, bwd)


def col2im(cols, hw, kernel, stride=1, padding=0) -> Tensor:
    """Scatter-add patches back onto the image plane (adjoint of im2col)."""
    cols = as_tensor(cols)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    h, w = hw
    n, c = cols.shape[0], cols.shape[1]
    oh, ow = cols.shape[4], cols.shape[5]
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    d = cols.data
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += d[:, :, i, j]
    out = padded[:, :, ph:ph + h, pw:pw + w].copy() if (ph or pw) else padded

    def bwd(g, needs):
        return (im2col(g, kernel, stride, padding),)

    return _apply("col2im", (cols,), out, bwd)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation convolution of NCHW input with (CO, CI, KH, KW) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and (CO, CI, KH, KW) weight")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"incompatible channel counts: input has {c}, kernel expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    cols = im2col(x, (kh, kw), stride, padding)              # (N, C, KH, KW, OH, OW)
    cols = transpose(cols, (0, 4, 5, 1, 2, 3))               # (N, OH, OW, C, KH, KW)
    cols = reshape(cols, (n * oh * ow, c * kh * kw))
    wmat = transpose(reshape(weight, (co, c * kh * kw)))     # (C*KH*KW, CO)
    out = matmul(cols, wmat)                                 # (N*OH*OW, CO)
    out = transpose(reshape(out, (n, oh, ow, co)), (0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias)
        out = add(out, reshape(bias, (co, 1, 1)))
    return out


def _pool_windows(x: Tensor, kernel, stride) -> Tensor:
    """Pooling windows shaped (N, C, OH, OW, KH*KW), channels kept separate."""
    n, c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    oh, ow = _out_size(h, kh, sh, 0), _out_size(w, kw, sw, 0)
    cols = im2col(reshape(x, (n * c, 1, h, w)), kernel, stride, 0)
    cols = reshape(cols, (n, c, kh * kw, oh, ow))
    return transpose(cols, (0, 1, 3, 4, 2))


def maxpool2d(x, kernel=2, stride=None) -> Tensor:
    """Max pooling; backward routes gradient to the saved argmax per window
    (ties broken toward the lowest linear input index)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("maxpool2d expects an NCHW tensor")
    if stride is None:
        stride = kernel
    win = _pool_windows(x, kernel, stride)
    idx = win.data.argmax(axis=-1)
    onehot = np.zeros_like(win.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return reduce_sum(mul(win, Tensor(onehot)), axis=-1)


def avgpool2d(x, kernel=2, stride=None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("avgpool2d expects an NCHW tensor")
    if stride is None:
        stride = kernel
    win = _pool_windows(x, kernel, stride)
    kh, kw = _pair(kernel)
    return mul(reduce_sum(win, axis=-1), 1.0 / (kh * kw))


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------

def backward(loss: Tensor, wrt, create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar `loss` with respect to each tensor in `wrt`.

    With ``create_graph=True`` the gradient computation is recorded on the
    same graph, so the returned tensors can appear in a further backward pass
    (second-order gradients). Registered overrides on non-linear nodes are
    invoked in place of their analytic rules.
    """
    wrt_list = list(wrt) if isinstance(wrt, (list, tuple)) else [wrt]
    if loss.node is None:
        raise RuntimeError("loss is not attached to a graph; it was computed "
                           "outside recording or from constants only")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    seed = Tensor(np.ones_like(loss.data))
    return _backward_seeded(loss, seed, wrt_list, create_graph)


def seed_backward(activation: Tensor, target_index, wrt,
                  create_graph: bool = False) -> list[Tensor]:
    """Backward from one activation component, seeded with a one-hot vector.

    Equivalent to ``backward(activation[target_index], ...)``. For a 2-D
    (batched) activation, `target_index` is a per-row sequence of indices and
    the seed is the matching stack of one-hot rows.
    """
    wrt_list = list(wrt) if isinstance(wrt, (list, tuple)) else [wrt]
    if activation.node is None:
        raise RuntimeError("activation is not attached to a graph")
    seed = np.zeros(activation.shape)
    if activation.ndim == 1:
        t = int(target_index)
        if not 0 <= t < activation.shape[0]:
            raise IndexError(f"target index {t} out of range for {activation.shape[0]} classes")
        seed[t] = 1.0
    elif activation.ndim == 2:
        targets = np.asarray(target_index, dtype=np.int64).reshape(-1)
        if targets.shape[0] != activation.shape[0]:
            raise IndexError("one target index per activation row required")
        if np.any(targets < 0) or np.any(targets >= activation.shape[1]):
            raise IndexError("target index out of range")
        seed[np.arange(targets.shape[0]), targets] = 1.0
    else:
        raise ValueError("seed_backward expects a vector or a batch of vectors")
    return _backward_seeded(activation, Tensor(seed), wrt_list, create_graph)


def _backward_seeded(root: Tensor, seed: Tensor, wrt_list: list,
                     create_graph: bool) -> list[Tensor]:
    graph = root.node.graph
    root_id = root.node.id
    nodes = graph.nodes
    wrt_ids = []
    for t in wrt_list:
        if t.node is None or t.node.graph is not graph:
            raise RuntimeError("wrt tensor is not part of the loss graph")
        wrt_ids.append(t.node.id)

    # mark nodes that can reach a wrt tensor; gradients flow only into these
    need = np.zeros(root_id + 1, dtype=bool)
    for wid in wrt_ids:
        if wid <= root_id:
            need[wid] = True
    for nid in range(root_id + 1):
        if need[nid]:
            continue
        for pid in nodes[nid].parents:
            if pid is not None and need[pid]:
                need[nid] = True
                break

    grads: dict[int, Tensor] = {root_id: seed}
    results: dict[int, Tensor] = {}
    wrt_set = set(wrt_ids)

    prev = _recording()
    _state.recording = create_graph
    try:
        for nid in range(root_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = nodes[nid]
            if nid in wrt_set:
                results[nid] = g
            if node.backward_rule is None:
                continue
            if node.override_id is not None:
                rule = graph.override_table[node.override_id]
                gins = (rule(g, node.saved_input, node.ref),)
            else:
                needs = tuple(pid is not None and need[pid] for pid in node.parents)
                if not any(needs):
                    continue
                gins = node.backward_rule(g, needs)
            for pid, gi in zip(node.parents, gins):
                if pid is None or gi is None or not need[pid]:
                    continue
                prev_g = grads.get(pid)
                grads[pid] = gi if prev_g is None else add(prev_g, gi)
    finally:
        _state.recording = prev

    out = []
    for t, wid in zip(wrt_list, wrt_ids):
        r = results.get(wid)
        out.append(r if r is not None else Tensor(np.zeros(t.shape)))
    return out


def register_override(target: Union[Tensor, Node], rule: Callable) -> int:
    """Register a backward override on a non-linear op instance.

    `target` is the output tensor of the non-linear op (or its node). The
    rule is called as ``rule(grad_out, feature, reference)`` and must return
    the gradient with respect to the op's input.
    """
    node = target.node if isinstance(target, Tensor) else target
    if node is None:
        raise ValueError("tensor is not attached to a graph")
    return node.graph.register_override(node, rule)
