"""Lower architecture descriptions to executable graphs.

Conv descriptions never fail to compile.  Three repair rules make that true:
a layer with no selected inputs reads the image; outputs nobody consumes are
concatenated in front of the classifier; inputs of different spatial size are
zero-padded up to the largest before depth concatenation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .arch import CellDescription, ConvArch, tree_children
from .autodiff import Graph, GraphBuilder, Shape

COMBINER_OPS = {"add": "add", "elem_mult": "mul", "max": "maximum"}


@dataclass(frozen=True)
class CompiledGraph:
    graph: Graph
    kind: str  # "conv" | "cell" | "lstm"
    buffers: tuple[str, ...] = ()  # non-trainable slots (normalization statistics)
    meta: Mapping = field(default_factory=dict)

    @property
    def manifest(self) -> dict[str, Shape]:
        return dict(self.graph.params)

    @property
    def trainable(self) -> dict[str, Shape]:
        return {k: s for k, s in self.graph.params.items() if k not in self.buffers}

    @property
    def signature(self) -> dict[str, dict[str, Shape]]:
        return {"inputs": self.graph.input_shapes(), "outputs": self.graph.output_shapes()}

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.trainable.values()))


# --------------------------------------------------------------------------
# conv


def _pad_to(b: GraphBuilder, node: int, h: int, w: int) -> int:
    _, nh, nw, _ = b.shape(node)
    if (nh, nw) == (h, w):
        return node
    dh, dw = h - nh, w - nw
    return b.pad(node, pads=((0, 0), (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2), (0, 0)))


def _merge(b: GraphBuilder, nodes: list[int], name: str) -> int:
    """Zero-pad to the largest spatial size, then depth-concatenate."""
    if len(nodes) == 1:
        return nodes[0]
    h = max(b.shape(n)[1] for n in nodes)
    w = max(b.shape(n)[2] for n in nodes)
    return b.concat(*[_pad_to(b, n, h, w) for n in nodes], name=name)


def conv_block(b: GraphBuilder, x: int, prefix: str, kh: int, kw: int, sh: int, sw: int,
               n_filters: int, training: bool = True, eps: float = 1e-5) -> int:
    """conv (im2col + matmul) -> per-channel normalization -> relu."""
    n, h, w, c = b.shape(x)
    cols = b.im2col(x, kh=kh, kw=kw, sh=sh, sw=sw, name=f"{prefix}.im2col")
    y = b.matmul(cols, b.param(f"{prefix}.W", (kh * kw * c, n_filters)))
    ho, wo = -(-h // sh), -(-w // sw)
    y = b.reshape(y, shape=(n, ho, wo, n_filters))
    gamma = b.param(f"{prefix}.gamma", (n_filters,))
    beta = b.param(f"{prefix}.beta", (n_filters,))
    if training:
        y = b.batchnorm(y, gamma, beta, eps=eps, name=f"{prefix}.bn")
    else:
        y = b.affine_norm(y, gamma, beta, b.param(f"{prefix}.mean", (n_filters,)),
                          b.param(f"{prefix}.var", (n_filters,)), eps=eps, name=f"{prefix}.bn")
    return b.relu(y, name=prefix)


def compile_conv(desc: ConvArch, input_shape: tuple[int, int, int], n_classes: int, batch: int = 1,
                 training: bool = True, eps: float = 1e-5, loss: bool = False) -> CompiledGraph:
    """Image (batch, H, W, C) -> logits (batch, n_classes).

    ``training`` selects batch statistics for normalization; otherwise running
    statistics are read from the ``conv{i}.mean`` / ``conv{i}.var`` buffers.
    With ``loss`` a ``labels`` input and a mean cross-entropy output are added.
    """
    b = GraphBuilder()
    image = b.input("image", (batch,) + tuple(input_shape))
    outs: list[int] = []
    consumed: set[int] = set()
    buffers = []
    for i, layer in enumerate(desc.layers):
        if layer.skip_inputs:
            x = _merge(b, [outs[j] for j in layer.skip_inputs], name=f"conv{i}.in")
            consumed.update(layer.skip_inputs)
        else:
            x = image
        y = conv_block(b, x, f"conv{i}", layer.filter_height, layer.filter_width,
                       layer.stride_height, layer.stride_width, layer.n_filters, training, eps)
        if i in desc.pool_after:
            y = b.maxpool(y, name=f"pool{i}")
        outs.append(y)
        if not training:
            buffers += [f"conv{i}.mean", f"conv{i}.var"]
    loose = [i for i in range(len(outs)) if i not in consumed]
    feat = _merge(b, [outs[i] for i in loose], name="classifier.in")
    pooled = b.mean(feat, axes=(1, 2), name="global_pool")
    width = b.shape(pooled)[1]
    logits = b.bias_add(b.matmul(pooled, b.param("fc.W", (width, n_classes))),
                        b.param("fc.b", (n_classes,)), name="logits")
    b.output("logits", logits)
    if loss:
        labels = b.input("labels", (batch,))
        b.output("loss", b.mean(b.softmax_xent(logits, labels)))
    return CompiledGraph(b.build(), "conv", tuple(buffers),
                         {"desc": desc, "loose_layers": tuple(loose), "input_shape": tuple(input_shape),
                          "n_classes": n_classes, "batch": batch, "eps": eps})


# --------------------------------------------------------------------------
# recurrent cells


def emit_cell(b: GraphBuilder, desc: CellDescription, x: int, h: int, c: int,
              hidden_dim: int, prefix: str = "") -> tuple[int, int]:
    """Append one step of ``desc`` to ``b``; returns (h_t, c_t) node ids."""
    base = desc.base
    input_dim = b.shape(x)[-1]
    children = tree_children(base)
    out_i, target = desc.cell_indices
    pre: dict[int, int] = {}
    post: dict[int, int] = {}
    inject_pre = None
    for k, (comb, act) in enumerate(desc.node_blocks):
        if k < base:
            wx = b.param(f"{prefix}W{2 * k + 1}", (input_dim, hidden_dim))
            wh = b.param(f"{prefix}W{2 * k + 2}", (hidden_dim, hidden_dim))
            left, right = b.matmul(x, wx), b.matmul(h, wh)
        else:
            left, right = (post[j] for j in children[k])
        pre[k] = b.op(COMBINER_OPS[comb], left, right, name=f"{prefix}node{k}.pre")
        post[k] = b.op(act, pre[k], name=f"{prefix}node{k}")
        if k == target:
            icomb, iact = desc.inject_block
            inject_pre = b.op(COMBINER_OPS[icomb], post[k], c, name=f"{prefix}inject.pre")
            post[k] = b.op(iact, inject_pre, name=f"{prefix}inject")
    c_t = inject_pre if out_i == target else pre[out_i]
    h_t = post[len(desc.node_blocks) - 1]
    return h_t, c_t


def emit_lstm(b: GraphBuilder, x: int, h: int, c: int, hidden_dim: int, prefix: str = "") -> tuple[int, int]:
    input_dim = b.shape(x)[-1]
    z = b.add(b.matmul(x, b.param(f"{prefix}Wx", (input_dim, 4 * hidden_dim))),
              b.matmul(h, b.param(f"{prefix}Wh", (hidden_dim, 4 * hidden_dim))))
    z = b.bias_add(z, b.param(f"{prefix}b", (4 * hidden_dim,)))
    i, f, g, o = (b.slice(z, axis=-1, start=k * hidden_dim, stop=(k + 1) * hidden_dim) for k in range(4))
    c_t = b.add(b.mul(b.sigmoid(f), c), b.mul(b.sigmoid(i), b.tanh(g)), name=f"{prefix}c")
    h_t = b.mul(b.sigmoid(o), b.tanh(c_t), name=f"{prefix}h")
    return h_t, c_t


def _step_graph(kind, emit, input_dim: int, hidden_dim: int, batch: int, meta) -> CompiledGraph:
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("dimensions must be >= 1")
    b = GraphBuilder()
    x = b.input("x", (batch, input_dim))
    h = b.input("h_prev", (batch, hidden_dim))
    c = b.input("c_prev", (batch, hidden_dim))
    h_t, c_t = emit(b, x, h, c)
    b.output("h", h_t)
    b.output("c", c_t)
    return CompiledGraph(b.build(), kind, (), meta)


def compile_cell(desc: CellDescription, input_dim: int, hidden_dim: int, batch: int = 1) -> CompiledGraph:
    return _step_graph("cell", lambda b, x, h, c: emit_cell(b, desc, x, h, c, hidden_dim),
                       input_dim, hidden_dim, batch, {"desc": desc, "hidden_dim": hidden_dim})


def reference_lstm(input_dim: int, hidden_dim: int, batch: int = 1) -> CompiledGraph:
    return _step_graph("lstm", lambda b, x, h, c: emit_lstm(b, x, h, c, hidden_dim),
                       input_dim, hidden_dim, batch, {"hidden_dim": hidden_dim})


def compile_sequence_model(cell: CompiledGraph, vocab: int, steps: int, batch: int) -> CompiledGraph:
    """Unroll a one-step cell (or reference LSTM) into a next-token model.

    Inputs: ``x`` one-hot tokens flattened to (batch, steps*vocab), ``y``
    targets (batch*steps,) in row-major (example, step) order and ``w``
    per-target weights.  Outputs: ``nll`` (weighted per-target negative
    log-likelihood) and ``loss`` = mean(nll).
    """
    hidden = cell.meta["hidden_dim"]
    b = GraphBuilder()
    x = b.input("x", (batch, steps * vocab))
    zeros = b.const(np.zeros((batch, hidden)))
    h = c = zeros
    w_out = b.param("out.W", (hidden, vocab))
    b_out = b.param("out.b", (vocab,))
    logits = []
    for t in range(steps):
        xt = b.slice(x, axis=-1, start=t * vocab, stop=(t + 1) * vocab)
        if cell.kind == "lstm":
            h, c = emit_lstm(b, xt, h, c, hidden)
        else:
            h, c = emit_cell(b, cell.meta["desc"], xt, h, c, hidden)
        logits.append(b.bias_add(b.matmul(h, w_out), b_out))
    flat = b.reshape(b.concat(*logits), shape=(batch * steps, vocab))
    nll = b.softmax_xent(flat, b.input("y", (batch * steps,)), b.input("w", (batch * steps,)))
    b.output("nll", nll)
    b.output("loss", b.mean(nll))
    return CompiledGraph(b.build(), f"seq-{cell.kind}", (),
                         dict(cell.meta, vocab=vocab, steps=steps, batch=batch))


def cell_param_count(base: int, input_dim: int, hidden: int, vocab: int) -> int:
    return base * (input_dim * hidden + hidden * hidden) + hidden * vocab + vocab


def lstm_param_count(input_dim: int, hidden: int, vocab: int) -> int:
    return 4 * hidden * (input_dim + hidden) + 4 * hidden + hidden * vocab + vocab


def hidden_for_budget(budget: int, count) -> int:
    """Largest hidden size whose ``count(hidden)`` stays within ``budget`` (at least 1)."""
    h = 1
    while count(h + 1) <= budget:
        h += 1
    return h


# --------------------------------------------------------------------------
# parameters and inspection


def init_params(manifest: Mapping[str, Shape], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights; unit scale / zero shift for normalization."""
    out = {}
    for name, shape in manifest.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma", "var"):
            out[name] = np.ones(shape)
        elif leaf in ("beta", "mean", "b") or len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / shape[0])
            out[name] = rng.uniform(-bound, bound, size=shape)
    return out


def dump(compiled: CompiledGraph) -> str:
    """Human-readable node list, shapes and parameter manifest."""
    g = compiled.graph
    lines = [f"# kind: {compiled.kind}", f"# nodes: {len(g.nodes)}"]
    desc = compiled.meta.get("desc")
    if isinstance(desc, CellDescription):
        base = desc.base
        children = tree_children(base)
        lines.append(f"# tree: base {base}, {base} leaves, {base - 1} internal nodes")
        for k, (comb, act) in enumerate(desc.node_blocks):
            role = "leaf" if k < base else f"internal <- {children[k]}"
            lines.append(f"#   node {k}: {comb}/{act} ({role})")
        lines.append(f"#   inject c_prev at node {desc.target_index}: "
                     f"{desc.inject_block[0]}/{desc.inject_block[1]}")
        lines.append(f"#   c_t read at node {desc.output_index} (pre-activation)")
        lines.append(f"#   h_t read at node {len(desc.node_blocks) - 1} (root)")
    for k, v in compiled.signature["inputs"].items():
        lines.append(f"input  {k}: {list(v)}")
    for k, v in compiled.signature["outputs"].items():
        lines.append(f"output {k}: {list(v)}")
    for idx, node in enumerate(g.nodes):
        if node.op in ("input", "param", "const"):
            continue
        label = f" {node.name}" if node.name else ""
        lines.append(f"%{idx} = {node.op}({', '.join('%' + str(i) for i in node.inputs)}) "
                     f"-> {list(node.shape)}{label}")
    total = 0
    for name, shape in sorted(g.params.items()):
        size = int(np.prod(shape))
        total += size if name not in compiled.buffers else 0
        tag = " (buffer)" if name in compiled.buffers else ""
        lines.append(f"param {name}: {list(shape)} = {size}{tag}")
    lines.append(f"# trainable parameters: {total}")
    return "\n".join(lines) + "\n"
