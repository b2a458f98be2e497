"""Static compute graphs over float64 numpy arrays with reverse-mode autodiff.

A :class:`Graph` is an immutable, topologically ordered list of nodes.  Leaf
nodes are named inputs, parameter slots and constants; every other node is an
op from :data:`OPS`.  Graphs are built with :class:`GraphBuilder`, which infers
shapes as nodes are added and can optionally evaluate them eagerly (the
controller needs values mid-construction to sample its next action).

Tensors are plain ``numpy.ndarray`` objects with dtype float64.  There is no
broadcasting: elementwise ops require equal shapes, and the few ops that mix
shapes (``bias_add``, ``concat``, ``pad``, ``batchnorm``) say so explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

Shape = tuple[int, ...]


class GraphError(ValueError):
    """Raised for malformed graphs or shape mismatches, naming the node."""


class UnsupportedOpError(GraphError):
    """Raised when backward reaches an op that has no derivative."""


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: Shape
    attrs: Mapping = field(default_factory=dict)
    name: str | None = None

    def label(self, idx: int) -> str:
        return f"node {idx} ({self.op}{' ' + self.name if self.name else ''})"


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    params: Mapping[str, Shape]
    inputs: Mapping[str, int]
    outputs: Mapping[str, int]

    def __len__(self) -> int:
        return len(self.nodes)

    def input_shapes(self) -> dict[str, Shape]:
        return {k: self.nodes[i].shape for k, i in self.inputs.items()}

    def output_shapes(self) -> dict[str, Shape]:
        return {k: self.nodes[i].shape for k, i in self.outputs.items()}


# --------------------------------------------------------------------------
# op definitions


@dataclass(frozen=True)
class OpDef:
    infer: Callable  # (shapes, attrs) -> shape
    fwd: Callable  # (vals, attrs) -> array
    bwd: Callable | None  # (g, vals, out, attrs) -> tuple of grads (None = no grad)
    arity: int | None = None  # None means variadic


def _same(shapes, attrs):
    first = shapes[0]
    for s in shapes[1:]:
        if s != first:
            raise GraphError(f"operand shapes differ: {shapes}")
    return first


def _unary(shapes, attrs):
    return shapes[0]


def _matmul_infer(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise GraphError(f"matmul needs (n,k)@(k,m), got {a} @ {b}")
    return (a[0], b[1])


def _matmul_bwd(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _max_bwd(g, vals, out, attrs):
    a, b = vals
    take_a = a >= b
    return np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)


def _concat_infer(shapes, attrs):
    if not shapes:
        raise GraphError("concat of nothing")
    head = shapes[0][:-1]
    for s in shapes:
        if s[:-1] != head:
            raise GraphError(f"concat needs equal leading dims, got {shapes}")
    return head + (sum(s[-1] for s in shapes),)


def _concat_bwd(g, vals, out, attrs):
    splits = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return tuple(np.split(g, splits, axis=-1))


def _pad_infer(shapes, attrs):
    (s,) = shapes
    pads = attrs["pads"]
    if len(pads) != len(s):
        raise GraphError(f"pad spec {pads} does not match rank of {s}")
    return tuple(d + lo + hi for d, (lo, hi) in zip(s, pads))


def _zero_pad(x, pads):
    out = np.zeros(tuple(d + lo + hi for d, (lo, hi) in zip(x.shape, pads)), dtype=x.dtype)
    out[tuple(slice(lo, lo + d) for d, (lo, _) in zip(x.shape, pads))] = x
    return out


def _pad_fwd(vals, attrs):
    return _zero_pad(vals[0], attrs["pads"])


def _pad_bwd(g, vals, out, attrs):
    idx = tuple(slice(lo, g.shape[k] - hi) for k, (lo, hi) in enumerate(attrs["pads"]))
    return (g[idx],)


def _slice_infer(shapes, attrs):
    (s,) = shapes
    ax = attrs["axis"] % len(s)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= s[ax]:
        raise GraphError(f"slice [{start}:{stop}] out of range for axis {ax} of {s}")
    return s[:ax] + (stop - start,) + s[ax + 1:]


def _slice_index(ndim, attrs):
    ax = attrs["axis"] % ndim
    return (slice(None),) * ax + (slice(attrs["start"], attrs["stop"]),)


def _slice_fwd(vals, attrs):
    return vals[0][_slice_index(vals[0].ndim, attrs)]


def _slice_bwd(g, vals, out, attrs):
    dx = np.zeros_like(vals[0])
    dx[_slice_index(dx.ndim, attrs)] = g
    return (dx,)


def _xent_infer(shapes, attrs):
    logits, targets = shapes[0], shapes[1]
    if len(logits) != 2 or targets != (logits[0],):
        raise GraphError(f"softmax_xent needs logits (n,c) and targets (n,), got {shapes}")
    if len(shapes) == 3 and shapes[2] != (logits[0],):
        raise GraphError(f"softmax_xent weights must be (n,), got {shapes[2]}")
    return (logits[0],)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _xent_fwd(vals, attrs):
    logits, targets = vals[0], vals[1].astype(np.intp)
    loss = -_log_softmax(logits)[np.arange(len(targets)), targets]
    if len(vals) == 3:
        loss = loss * vals[2]
    return loss


def _xent_bwd(g, vals, out, attrs):
    logits, targets = vals[0], vals[1].astype(np.intp)
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(targets)), targets] -= 1.0
    w = g if len(vals) == 2 else g * vals[2]
    grads = [p * w[:, None], None]
    if len(vals) == 3:
        grads.append(None)
    return tuple(grads)


def _mean_infer(shapes, attrs):
    (s,) = shapes
    axes = attrs.get("axes")
    if axes is None:
        return ()
    axes = {a % len(s) for a in axes}
    return tuple(d for k, d in enumerate(s) if k not in axes)


def _mean_fwd(vals, attrs):
    axes = attrs.get("axes")
    return np.asarray(vals[0].mean(axis=None if axes is None else tuple(axes)), dtype=DTYPE)


def _mean_bwd(g, vals, out, attrs):
    x = vals[0]
    axes = attrs.get("axes")
    if axes is None:
        return (np.full(x.shape, float(g) / x.size),)
    axes = tuple(sorted(a % x.ndim for a in axes))
    count = math.prod(x.shape[a] for a in axes)
    return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)


def _reshape_infer(shapes, attrs):
    (s,) = shapes
    new = tuple(attrs["shape"])
    if math.prod(new) != math.prod(s):
        raise GraphError(f"cannot reshape {s} to {new}")
    return new


def _bias_infer(shapes, attrs):
    x, b = shapes
    if b != (x[-1],):
        raise GraphError(f"bias {b} does not match trailing dim of {x}")
    return x


def _bias_bwd(g, vals, out, attrs):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _conv_geometry(h, w, attrs):
    kh, kw, sh, sw = attrs["kh"], attrs["kw"], attrs["sh"], attrs["sw"]
    ho, wo = -(-h // sh), -(-w // sw)
    ph = max((ho - 1) * sh + kh - h, 0)
    pw = max((wo - 1) * sw + kw - w, 0)
    return ho, wo, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)


def _im2col_infer(shapes, attrs):
    (s,) = shapes
    if len(s) != 4:
        raise GraphError(f"im2col needs NHWC input, got {s}")
    n, h, w, c = s
    ho, wo, _, _ = _conv_geometry(h, w, attrs)
    return (n * ho * wo, attrs["kh"] * attrs["kw"] * c)


def _im2col_fwd(vals, attrs):
    x = vals[0]
    n, h, w, c = x.shape
    kh, kw, sh, sw = attrs["kh"], attrs["kw"], attrs["sh"], attrs["sw"]
    ho, wo, ph, pw = _conv_geometry(h, w, attrs)
    xp = _zero_pad(x, ((0, 0), ph, pw, (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # win: (n, ho, wo, c, kh, kw) -> rows ordered (kh, kw, c)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _im2col_bwd(g, vals, out, attrs):
    x = vals[0]
    n, h, w, c = x.shape
    kh, kw, sh, sw = attrs["kh"], attrs["kw"], attrs["sh"], attrs["sw"]
    ho, wo, ph, pw = _conv_geometry(h, w, attrs)
    cols = g.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + sum(ph), w + sum(pw), c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, :, i, j]
    return (dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w],)


def _bn_infer(shapes, attrs):
    x, gamma, beta = shapes[:3]
    if gamma != (x[-1],) or beta != (x[-1],):
        raise GraphError(f"batchnorm scale/shift must be ({x[-1]},), got {gamma}, {beta}")
    if len(shapes) == 5 and (shapes[3] != gamma or shapes[4] != gamma):
        raise GraphError(f"batchnorm statistics must be ({x[-1]},)")
    return x


def _bn_stats(x):
    flat = x.reshape(-1, x.shape[-1])
    return flat.mean(axis=0), flat.var(axis=0)


def _bn_fwd(vals, attrs):
    x, gamma, beta = vals
    mu, var = _bn_stats(x)
    return (x - mu) / np.sqrt(var + attrs["eps"]) * gamma + beta


def _bn_bwd(g, vals, out, attrs):
    x, gamma, beta = vals
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    gf = g.reshape(-1, c)
    m = flat.shape[0]
    mu, var = flat.mean(axis=0), flat.var(axis=0)
    inv = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = (flat - mu) * inv
    dgamma = (gf * xhat).sum(axis=0)
    dbeta = gf.sum(axis=0)
    dxhat = gf * gamma
    dx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx.reshape(x.shape), dgamma, dbeta


def _affine_norm_fwd(vals, attrs):
    x, gamma, beta, mu, var = vals
    return (x - mu) / np.sqrt(var + attrs["eps"]) * gamma + beta


def _affine_norm_bwd(g, vals, out, attrs):
    x, gamma, beta, mu, var = vals
    c = x.shape[-1]
    inv = 1.0 / np.sqrt(var + attrs["eps"])
    gf = g.reshape(-1, c)
    xhat = (x.reshape(-1, c) - mu) * inv
    dvar = (gf * gamma * (x.reshape(-1, c) - mu)).sum(axis=0) * -0.5 * inv**3
    dmu = -(gf * gamma * inv).sum(axis=0)
    return g * gamma * inv, (gf * xhat).sum(axis=0), gf.sum(axis=0), dmu, dvar


def _pool_infer(shapes, attrs):
    (s,) = shapes
    if len(s) != 4:
        raise GraphError(f"maxpool needs NHWC input, got {s}")
    n, h, w, c = s
    return (n, -(-h // 2), -(-w // 2), c)


def _pool_view(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)), constant_values=-np.inf)
    return xp.reshape(n, xp.shape[1] // 2, 2, xp.shape[2] // 2, 2, c)


def _pool_fwd(vals, attrs):
    return _pool_view(vals[0]).max(axis=(2, 4))


def _pool_bwd(g, vals, out, attrs):
    x = vals[0]
    v = _pool_view(x)
    n, ho, _, wo, _, c = v.shape
    # route each window's gradient to its first maximal element
    flat = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    dv = (onehot * g[..., None]).reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = dv.reshape(n, ho * 2, wo * 2, c)
    return (dx[:, : x.shape[1], : x.shape[2]],)


def _argmax_infer(shapes, attrs):
    (s,) = shapes
    if len(s) != 2:
        raise GraphError(f"argmax needs (n,c), got {s}")
    return (s[0],)


OPS: dict[str, OpDef] = {
    "matmul": OpDef(_matmul_infer, lambda v, a: v[0] @ v[1], _matmul_bwd, 2),
    "add": OpDef(_same, lambda v, a: v[0] + v[1], lambda g, v, o, a: (g, g), 2),
    "mul": OpDef(_same, lambda v, a: v[0] * v[1], lambda g, v, o, a: (g * v[1], g * v[0]), 2),
    "maximum": OpDef(_same, lambda v, a: np.maximum(v[0], v[1]), _max_bwd, 2),
    "tanh": OpDef(_unary, lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),), 1),
    "sigmoid": OpDef(_unary, lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),), 1),
    "relu": OpDef(_unary, lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),), 1),
    "identity": OpDef(_unary, lambda v, a: v[0], lambda g, v, o, a: (g,), 1),
    "sin": OpDef(_unary, lambda v, a: np.sin(v[0]), lambda g, v, o, a: (g * np.cos(v[0]),), 1),
    "scale": OpDef(_unary, lambda v, a: v[0] * a["factor"], lambda g, v, o, a: (g * a["factor"],), 1),
    "concat": OpDef(_concat_infer, lambda v, a: np.concatenate(v, axis=-1), _concat_bwd, None),
    "pad": OpDef(_pad_infer, _pad_fwd, _pad_bwd, 1),
    "slice": OpDef(_slice_infer, _slice_fwd, _slice_bwd, 1),
    "softmax_xent": OpDef(_xent_infer, _xent_fwd, _xent_bwd, None),
    "mean": OpDef(_mean_infer, _mean_fwd, _mean_bwd, 1),
    "reshape": OpDef(_reshape_infer, lambda v, a: v[0].reshape(a["shape"]),
                     lambda g, v, o, a: (g.reshape(v[0].shape),), 1),
    "bias_add": OpDef(_bias_infer, lambda v, a: v[0] + v[1], _bias_bwd, 2),
    "im2col": OpDef(_im2col_infer, _im2col_fwd, _im2col_bwd, 1),
    "batchnorm": OpDef(_bn_infer, _bn_fwd, _bn_bwd, 3),
    "affine_norm": OpDef(_bn_infer, _affine_norm_fwd, _affine_norm_bwd, 5),
    "maxpool": OpDef(_pool_infer, _pool_fwd, _pool_bwd, 1),
    "argmax": OpDef(_argmax_infer, lambda v, a: v[0].argmax(axis=1).astype(DTYPE), None, 1),
}

LEAF_OPS = ("input", "param", "const")

# Ops whose trailing inputs carry integer labels / weights rather than values
# to differentiate; gradients never flow into those positions.
_NO_GRAD_INPUTS = {"softmax_xent": (1, 2)}


# --------------------------------------------------------------------------
# construction


class GraphBuilder:
    """Incrementally build a :class:`Graph`.

    With ``params`` and ``feeds`` given, nodes are evaluated as they are added
    and :meth:`value` returns their arrays.  Node handles are plain ints.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None,
                 feeds: Mapping[str, np.ndarray] | None = None):
        self._nodes: list[Node] = []
        self._params: dict[str, Shape] = {}
        self._param_nodes: dict[str, int] = {}
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}
        self.eager = params is not None
        self._pvals = params
        self._feeds = feeds or {}
        self._values: list[np.ndarray] = []

    # leaves ---------------------------------------------------------------
    def input(self, name: str, shape: Sequence[int]) -> int:
        if name in self._inputs:
            raise GraphError(f"duplicate input {name!r}")
        shape = _check_shape(shape, name)
        idx = self._add(Node("input", (), shape, {}, name), None)
        self._inputs[name] = idx
        return idx

    def param(self, slot: str, shape: Sequence[int]) -> int:
        """Reference a parameter slot; repeated calls share one node."""
        shape = _check_shape(shape, slot)
        if slot in self._param_nodes:
            if self._params[slot] != shape:
                raise GraphError(f"parameter {slot!r} redeclared with shape {shape}, was {self._params[slot]}")
            return self._param_nodes[slot]
        self._params[slot] = shape
        idx = self._add(Node("param", (), shape, {}, slot), None)
        self._param_nodes[slot] = idx
        return idx

    def const(self, value, name: str | None = None) -> int:
        arr = np.array(value, dtype=DTYPE)
        arr.setflags(write=False)
        return self._add(Node("const", (), arr.shape, {"value": arr}, name), None)

    # ops ------------------------------------------------------------------
    def op(self, kind: str, *inputs: int, name: str | None = None, **attrs) -> int:
        try:
            opdef = OPS[kind]
        except KeyError:
            raise GraphError(f"unknown op {kind!r}") from None
        if opdef.arity is not None and len(inputs) != opdef.arity:
            raise GraphError(f"{kind} takes {opdef.arity} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise GraphError(f"{kind}: input id {i} does not reference an earlier node")
        shapes = [self._nodes[i].shape for i in inputs]
        try:
            shape = opdef.infer(shapes, attrs)
        except GraphError as exc:
            raise GraphError(f"node {len(self._nodes)} ({kind}{' ' + name if name else ''}): {exc}") from None
        return self._add(Node(kind, tuple(inputs), shape, attrs, name), opdef)

    def __getattr__(self, kind: str):
        # b.tanh(x), b.matmul(a, w), ... as shorthand for b.op("tanh", x)
        if kind in OPS:
            return lambda *inputs, **kw: self.op(kind, *inputs, **kw)
        raise AttributeError(kind)

    def output(self, name: str, node: int) -> int:
        self._outputs[name] = node
        return node

    def shape(self, node: int) -> Shape:
        return self._nodes[node].shape

    def value(self, node: int) -> np.ndarray:
        if not self.eager:
            raise GraphError("builder is not evaluating eagerly")
        return self._values[node]

    @property
    def values(self) -> list[np.ndarray]:
        return self._values

    def build(self) -> Graph:
        return Graph(tuple(self._nodes), dict(self._params), dict(self._inputs), dict(self._outputs))

    def _add(self, node: Node, opdef: OpDef | None) -> int:
        idx = len(self._nodes)
        self._nodes.append(node)
        if self.eager:
            if node.op == "input":
                self._values.append(_feed(self._feeds, node, idx))
            elif node.op == "param":
                self._values.append(_feed(self._pvals, node, idx))
            elif node.op == "const":
                self._values.append(node.attrs["value"])
            else:
                self._values.append(opdef.fwd([self._values[i] for i in node.inputs], node.attrs))
        return idx


def _check_shape(shape, name) -> Shape:
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise GraphError(f"{name!r}: every extent must be >= 1, got {shape}")
    return shape


def _feed(table, node: Node, idx: int) -> np.ndarray:
    try:
        val = table[node.name]
    except KeyError:
        raise GraphError(f"{node.label(idx)}: no value supplied") from None
    val = np.asarray(val, dtype=DTYPE)
    if val.shape != node.shape:
        raise GraphError(f"{node.label(idx)}: expected shape {node.shape}, got {val.shape}")
    return val


# --------------------------------------------------------------------------
# evaluation


def run(graph: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node; returns the value list indexed by node id."""
    extra = set(inputs) - set(graph.inputs)
    if extra:
        raise GraphError(f"unknown inputs: {sorted(extra)}")
    values: list[np.ndarray] = []
    for idx, node in enumerate(graph.nodes):
        if node.op == "input":
            values.append(_feed(inputs, node, idx))
        elif node.op == "param":
            values.append(_feed(params, node, idx))
        elif node.op == "const":
            values.append(node.attrs["value"])
        else:
            values.append(OPS[node.op].fwd([values[i] for i in node.inputs], node.attrs))
    return values


def forward(graph: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    values = run(graph, params, inputs)
    return {name: values[i] for name, i in graph.outputs.items()}


def backprop(graph: Graph, values: Sequence[np.ndarray], upstream: Mapping[str, np.ndarray],
             wrt_inputs: bool = False) -> dict[str, np.ndarray]:
    """Reverse sweep over already-computed ``values``.

    Returns a gradient for every parameter slot (zeros where unreachable) and,
    with ``wrt_inputs``, for every named input as well.
    """
    n = len(graph.nodes)
    grads: list[np.ndarray | None] = [None] * n
    for name, g in upstream.items():
        idx = graph.outputs[name]
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != graph.nodes[idx].shape:
            raise GraphError(f"upstream gradient for {name!r} has shape {g.shape}, "
                             f"output is {graph.nodes[idx].shape}")
        grads[idx] = g if grads[idx] is None else grads[idx] + g

    out = {slot: np.zeros(shape) for slot, shape in graph.params.items()}
    if wrt_inputs:
        out.update({name: np.zeros(graph.nodes[i].shape) for name, i in graph.inputs.items()})
    for idx in range(n - 1, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        if node.op == "param":
            out[node.name] = out[node.name] + g
            continue
        if node.op == "input":
            if wrt_inputs:
                out[node.name] = g
            continue
        if node.op == "const":
            continue
        opdef = OPS[node.op]
        if opdef.bwd is None:
            raise UnsupportedOpError(f"{node.label(idx)}: op {node.op!r} is not differentiable")
        in_grads = opdef.bwd(g, [values[i] for i in node.inputs], values[idx], node.attrs)
        skip = _NO_GRAD_INPUTS.get(node.op, ())
        for pos, (src, dg) in enumerate(zip(node.inputs, in_grads)):
            if dg is None or pos in skip:
                continue
            grads[src] = dg if grads[src] is None else grads[src] + dg
    return out


def backward(graph: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
             upstream: Mapping[str, np.ndarray] | None = None, wrt_inputs: bool = False) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream[k] * output[k])`` w.r.t. every parameter slot.

    ``upstream`` defaults to ones for every scalar output.
    """
    values = run(graph, params, inputs)
    if upstream is None:
        upstream = {}
        for name, i in graph.outputs.items():
            if graph.nodes[i].shape != ():
                raise GraphError(f"output {name!r} is not scalar; pass an explicit upstream gradient")
            upstream[name] = np.ones(())
    return backprop(graph, values, upstream, wrt_inputs=wrt_inputs)
