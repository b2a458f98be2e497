"""Architecture descriptions: search spaces, validation, counting and text format.

Two families exist.  A conv architecture is an ordered list of layer specs
(filter size, strides, filter count, and the set of earlier layers it reads
from).  A recurrent cell is a labelled complete binary tree: every node gets a
(combiner, activation) pair, plus one extra pair describing how the previous
memory state is injected and two node indices saying where it is injected and
where the new memory state is read.

Tree nodes are numbered leaves first (``0 .. base-1``), then internal nodes
bottom-up, pairing neighbours, so the root always has the largest index
``2*base - 2``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Union

import numpy as np

COMBINERS = ("add", "elem_mult", "max")
ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu", "sin")

DEFAULT_COMBINERS = ("add", "elem_mult")
DEFAULT_ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu")

FORMAT_NAME = "nasforge.arch"
FORMAT_VERSION = 1


class ArchParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


# --------------------------------------------------------------------------
# spaces


@dataclass(frozen=True)
class ConvSearchSpace:
    filter_heights: tuple[int, ...] = (1, 3, 5, 7)
    filter_widths: tuple[int, ...] = (1, 3, 5, 7)
    num_filters: tuple[int, ...] = (24, 36, 48, 64)
    strides: tuple[int, ...] = (1,)
    skip_connections: bool = True
    pool_after: tuple[int, ...] = ()

    family = "conv"

    @property
    def predicts_strides(self) -> bool:
        return self.strides != (1,)

    def token_lists(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-layer token classes in emission order."""
        out = [("filter_height", self.filter_heights), ("filter_width", self.filter_widths)]
        if self.predicts_strides:
            out += [("stride_height", self.strides), ("stride_width", self.strides)]
        out.append(("num_filters", self.num_filters))
        return out


@dataclass(frozen=True)
class CellSearchSpace:
    combiners: tuple[str, ...] = DEFAULT_COMBINERS
    activations: tuple[str, ...] = DEFAULT_ACTIVATIONS
    base: int = 8

    family = "cell"

    @property
    def n_nodes(self) -> int:
        return 2 * self.base - 1


SearchSpace = Union[ConvSearchSpace, CellSearchSpace]


def check_space(space: SearchSpace) -> None:
    """Raise ValueError if a space breaks its own invariants."""
    if isinstance(space, ConvSearchSpace):
        for name in ("filter_heights", "filter_widths", "num_filters", "strides"):
            vals = getattr(space, name)
            if not vals or any(v < 1 for v in vals) or list(vals) != sorted(set(vals)):
                raise ValueError(f"{name} must be non-empty, strictly increasing positive integers: {vals}")
    elif isinstance(space, CellSearchSpace):
        if space.base < 2 or space.base & (space.base - 1):
            raise ValueError(f"base must be a power of two >= 2, got {space.base}")
        for name, vocab in (("combiners", COMBINERS), ("activations", ACTIVATIONS)):
            vals = getattr(space, name)
            if not vals or len(set(vals)) != len(vals):
                raise ValueError(f"{name} must be non-empty and distinct: {vals}")
            unknown = [v for v in vals if v not in vocab]
            if unknown:
                raise ValueError(f"unknown {name}: {unknown}")
    else:
        raise TypeError(f"not a search space: {space!r}")


def extend_space(space: CellSearchSpace, extra_combiners=(), extra_activations=()) -> CellSearchSpace:
    for name in extra_combiners:
        if name not in COMBINERS:
            raise ValueError(f"unknown combiner {name!r}; supported: {COMBINERS}")
    for name in extra_activations:
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}; supported: {ACTIVATIONS}")
    combs = space.combiners + tuple(c for c in extra_combiners if c not in space.combiners)
    acts = space.activations + tuple(a for a in extra_activations if a not in space.activations)
    return replace(space, combiners=combs, activations=acts)


# --------------------------------------------------------------------------
# descriptions


@dataclass(frozen=True)
class ConvLayerSpec:
    filter_height: int
    filter_width: int
    stride_height: int
    stride_width: int
    n_filters: int
    skip_inputs: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "skip_inputs", tuple(sorted(set(self.skip_inputs))))


@dataclass(frozen=True)
class ConvArch:
    layers: tuple[ConvLayerSpec, ...]
    pool_after: tuple[int, ...] = ()

    family = "conv"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "pool_after", tuple(sorted(set(self.pool_after))))


@dataclass(frozen=True)
class CellDescription:
    node_blocks: tuple[tuple[str, str], ...]
    inject_block: tuple[str, str]
    cell_indices: tuple[int, int]  # (output node for c_t, target node for c_{t-1})

    family = "cell"

    def __post_init__(self):
        object.__setattr__(self, "node_blocks", tuple(tuple(b) for b in self.node_blocks))
        object.__setattr__(self, "inject_block", tuple(self.inject_block))
        object.__setattr__(self, "cell_indices", tuple(self.cell_indices))

    @property
    def base(self) -> int:
        return (len(self.node_blocks) + 1) // 2

    @property
    def output_index(self) -> int:
        return self.cell_indices[0]

    @property
    def target_index(self) -> int:
        return self.cell_indices[1]


ArchDescription = Union[ConvArch, CellDescription]


def tree_children(base: int) -> dict[int, tuple[int, int]]:
    """Map each internal node index to its (left, right) children."""
    children = {}
    level = list(range(base))
    nxt = base
    while len(level) > 1:
        up = []
        for left, right in zip(level[::2], level[1::2]):
            children[nxt] = (left, right)
            up.append(nxt)
            nxt += 1
        level = up
    return children


# Worked base-2 example used throughout the docs and tests.
WORKED_CELL = CellDescription(
    node_blocks=(("add", "tanh"), ("elem_mult", "relu"), ("elem_mult", "sigmoid")),
    inject_block=("add", "relu"),
    cell_indices=(1, 0),
)

# h_t = tanh(W3 x + W4 h): leaf 0 is zeroed by the multiplicative inject of c
# (c stays at its zero initial value), so only leaf 1 reaches the root.
TANH_RNN_CELL = CellDescription(
    node_blocks=(("add", "identity"), ("add", "identity"), ("add", "tanh")),
    inject_block=("elem_mult", "identity"),
    cell_indices=(0, 0),
)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    field: str
    index: int | None
    value: object
    message: str

    def __str__(self) -> str:
        at = f"[{self.index}]" if self.index is not None else ""
        return f"{self.field}{at} = {self.value!r}: {self.message}"


def validate(desc: ArchDescription, space: SearchSpace | None = None) -> list[Violation]:
    """Return every invariant or space-membership violation (empty when ok)."""
    if isinstance(desc, ConvArch):
        space = ConvSearchSpace() if space is None else space
        if not isinstance(space, ConvSearchSpace):
            return [Violation("family", None, "conv", "description family does not match space")]
        return _validate_conv(desc, space)
    if isinstance(desc, CellDescription):
        space = CellSearchSpace(base=max(desc.base, 2)) if space is None else space
        if not isinstance(space, CellSearchSpace):
            return [Violation("family", None, "cell", "description family does not match space")]
        return _validate_cell(desc, space)
    return [Violation("family", None, type(desc).__name__, "unknown description type")]


def _validate_conv(desc: ConvArch, space: ConvSearchSpace) -> list[Violation]:
    out = []
    if not desc.layers:
        out.append(Violation("layers", None, 0, "at least one layer required"))
    checks = (("filter_height", space.filter_heights), ("filter_width", space.filter_widths),
              ("stride_height", space.strides), ("stride_width", space.strides),
              ("n_filters", space.num_filters))
    for i, layer in enumerate(desc.layers):
        for name, allowed in checks:
            val = getattr(layer, name)
            if val not in allowed:
                out.append(Violation(f"layers.{name}", i, val, f"not in search space {list(allowed)}"))
        for j in layer.skip_inputs:
            if j >= i:
                out.append(Violation("layers.skip_inputs", i, j, "skip references later layer"))
            elif j < 0:
                out.append(Violation("layers.skip_inputs", i, j, "negative layer index"))
        if not space.skip_connections:
            expected = (i - 1,) if i > 0 else ()
            if layer.skip_inputs != expected:
                out.append(Violation("layers.skip_inputs", i, list(layer.skip_inputs),
                                     f"space has no skip connections; expected {list(expected)}"))
    expected_pools = tuple(p for p in space.pool_after if p < len(desc.layers))
    if desc.pool_after != expected_pools:
        out.append(Violation("pool_after", None, list(desc.pool_after),
                             f"pooling positions are fixed by the space: {list(expected_pools)}"))
    return out


def _validate_cell(desc: CellDescription, space: CellSearchSpace) -> list[Violation]:
    out = []
    n = space.n_nodes
    if len(desc.node_blocks) != n:
        out.append(Violation("nodes", None, len(desc.node_blocks), f"expected {n} node blocks for base {space.base}"))
    blocks = list(enumerate(desc.node_blocks)) + [(None, desc.inject_block)]
    for i, block in blocks:
        name = "nodes" if i is not None else "inject"
        if len(block) != 2:
            out.append(Violation(name, i, block, "block must be a (combiner, activation) pair"))
            continue
        comb, act = block
        if comb not in space.combiners:
            out.append(Violation(f"{name}.combiner", i, comb, f"not in search space {list(space.combiners)}"))
        if act not in space.activations:
            out.append(Violation(f"{name}.activation", i, act, f"not in search space {list(space.activations)}"))
    if len(desc.cell_indices) != 2:
        out.append(Violation("cell_index", None, desc.cell_indices, "expected (output, target)"))
    else:
        for label, val in zip(("output", "target"), desc.cell_indices):
            if not (isinstance(val, (int, np.integer)) and 0 <= val < n):
                out.append(Violation(f"cell_index.{label}", None, val, f"must be a node index in [0, {n - 1}]"))
    return out


def is_valid(desc: ArchDescription, space: SearchSpace | None = None) -> bool:
    return not validate(desc, space)


# --------------------------------------------------------------------------
# counting and enumeration


def count_search_space(space: SearchSpace, depth: int | None = None) -> int:
    """Exact number of distinct descriptions (arbitrary-precision int)."""
    check_space(space)
    if isinstance(space, CellSearchSpace):
        block = len(space.combiners) * len(space.activations)
        n = space.n_nodes
        return block**n * block * n * n
    if depth is None or depth < 1:
        raise ValueError("conv spaces need a layer count >= 1")
    per_layer = len(space.filter_heights) * len(space.filter_widths) * len(space.num_filters)
    if space.predicts_strides:
        per_layer *= len(space.strides) ** 2
    total = per_layer**depth
    if space.skip_connections:
        total *= 2 ** (depth * (depth - 1) // 2)
    return total


def enumerate_space(space: SearchSpace, depth: int | None = None) -> Iterator[ArchDescription]:
    """Yield every description in the space (brute force; small spaces only)."""
    check_space(space)
    if isinstance(space, CellSearchSpace):
        blocks = list(itertools.product(space.combiners, space.activations))
        idx = range(space.n_nodes)
        for nodes in itertools.product(blocks, repeat=space.n_nodes):
            for inject in blocks:
                for out_i, tgt_i in itertools.product(idx, idx):
                    yield CellDescription(nodes, inject, (out_i, tgt_i))
        return
    strides = space.strides
    per_layer = []
    for i in range(depth):
        if space.skip_connections:
            skips = [tuple(j for j in range(i) if mask >> j & 1) for mask in range(2**i)]
        else:
            skips = [(i - 1,) if i else ()]
        per_layer.append([
            ConvLayerSpec(fh, fw, sh, sw, nf, sk)
            for fh in space.filter_heights for fw in space.filter_widths
            for sh in strides for sw in strides
            for nf in space.num_filters for sk in skips
        ])
    pools = tuple(p for p in space.pool_after if p < depth)
    for layers in itertools.product(*per_layer):
        yield ConvArch(layers, pools)


def sample_uniform(space: SearchSpace, rng: np.random.Generator, depth: int | None = None) -> ArchDescription:
    """Every token uniform over its list, skip bits fair coins."""
    if isinstance(space, CellSearchSpace):
        def block():
            return (space.combiners[rng.integers(len(space.combiners))],
                    space.activations[rng.integers(len(space.activations))])
        nodes = tuple(block() for _ in range(space.n_nodes))
        inject = block()
        idx = (int(rng.integers(space.n_nodes)), int(rng.integers(space.n_nodes)))
        return CellDescription(nodes, inject, idx)
    layers = []
    for i in range(depth):
        vals = {name: int(vals[rng.integers(len(vals))]) for name, vals in space.token_lists()}
        if space.skip_connections:
            bits = rng.random(i) < 0.5
            skips = tuple(j for j in range(i) if bits[j])
        else:
            skips = (i - 1,) if i else ()
        layers.append(ConvLayerSpec(vals["filter_height"], vals["filter_width"],
                                    vals.get("stride_height", 1), vals.get("stride_width", 1),
                                    vals["num_filters"], skips))
    return ConvArch(tuple(layers), tuple(p for p in space.pool_after if p < depth))


def token_vector(desc: ArchDescription, space: SearchSpace) -> tuple[int, ...]:
    """Flatten a description to list positions (and 0/1 skip bits), in emission order."""
    if isinstance(desc, CellDescription):
        out = []
        for comb, act in desc.node_blocks + (desc.inject_block,):
            out += [space.combiners.index(comb), space.activations.index(act)]
        return tuple(out) + tuple(desc.cell_indices)
    out = []
    names = {"filter_height": "filter_height", "filter_width": "filter_width",
             "stride_height": "stride_height", "stride_width": "stride_width", "num_filters": "n_filters"}
    for i, layer in enumerate(desc.layers):
        for cls, vals in space.token_lists():
            out.append(vals.index(getattr(layer, names[cls])))
        if space.skip_connections:
            out += [int(j in layer.skip_inputs) for j in range(i)]
    return tuple(out)


# --------------------------------------------------------------------------
# text format


def to_dict(desc: ArchDescription) -> dict:
    head = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "family": desc.family}
    if isinstance(desc, ConvArch):
        head["pool_after"] = list(desc.pool_after)
        head["layers"] = [
            {"filter_height": l.filter_height, "filter_width": l.filter_width,
             "stride_height": l.stride_height, "stride_width": l.stride_width,
             "n_filters": l.n_filters, "skip_inputs": list(l.skip_inputs)}
            for l in desc.layers
        ]
        return head
    head["base"] = desc.base
    head["nodes"] = [{"combiner": c, "activation": a} for c, a in desc.node_blocks]
    head["inject"] = {"combiner": desc.inject_block[0], "activation": desc.inject_block[1]}
    head["cell_index"] = {"output": desc.output_index, "target": desc.target_index}
    return head


def serialize(desc: ArchDescription) -> str:
    return json.dumps(to_dict(desc), indent=2) + "\n"


def serialize_compact(desc: ArchDescription) -> str:
    """Single-line form, used inside line-delimited logs."""
    return json.dumps(to_dict(desc), separators=(",", ":"))


def _reject_float(text):
    raise ArchParseError(f"real numbers are not allowed: {text}")


def load_profile_json(text: str, allow_reals: bool = False):
    """Parse the restricted JSON profile (no floats/NaN unless ``allow_reals``)."""
    hooks = {} if allow_reals else {"parse_float": _reject_float, "parse_constant": _reject_float}
    try:
        return json.loads(text, **hooks)
    except json.JSONDecodeError as exc:
        raise ArchParseError(exc.msg, line=exc.lineno) from None
    except ArchParseError as exc:
        raise ArchParseError(str(exc), line=_line_of(text, str(exc).rsplit(" ", 1)[-1])) from None


def _line_of(text: str, needle: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


def _get(obj: dict, key: str, kind, path: str, text: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ArchParseError("missing", field=f"{path}{key}")
    val = obj[key]
    ok = isinstance(val, kind) and not (kind is int and isinstance(val, bool))
    if not ok:
        raise ArchParseError(f"expected {getattr(kind, '__name__', kind)}, got {val!r}",
                             line=_line_of(text, f'"{key}"'), field=f"{path}{key}")
    return val


def from_dict(obj: dict, text: str = "") -> ArchDescription:
    if not isinstance(obj, dict):
        raise ArchParseError("top level must be an object", line=1)
    if obj.get("format") != FORMAT_NAME:
        raise ArchParseError(f"expected format {FORMAT_NAME!r}", field="format")
    if obj.get("version") != FORMAT_VERSION:
        raise ArchParseError(f"unsupported version {obj.get('version')!r}", field="version")
    family = _get(obj, "family", str, "", text)
    if family == "conv":
        layers = []
        for i, l in enumerate(_get(obj, "layers", list, "", text)):
            p = f"layers[{i}]."
            skips = _get(l, "skip_inputs", list, p, text)
            if not all(isinstance(s, int) and not isinstance(s, bool) for s in skips):
                raise ArchParseError("skip inputs must be integers", field=f"{p}skip_inputs")
            layers.append(ConvLayerSpec(
                _get(l, "filter_height", int, p, text), _get(l, "filter_width", int, p, text),
                _get(l, "stride_height", int, p, text), _get(l, "stride_width", int, p, text),
                _get(l, "n_filters", int, p, text), tuple(skips)))
        pools = obj.get("pool_after", [])
        if not isinstance(pools, list) or not all(isinstance(p, int) for p in pools):
            raise ArchParseError("must be a list of integers", field="pool_after")
        return ConvArch(tuple(layers), tuple(pools))
    if family == "cell":
        base = _get(obj, "base", int, "", text)

        def block(o, p):
            return (_get(o, "combiner", str, p, text), _get(o, "activation", str, p, text))

        nodes = tuple(block(n, f"nodes[{i}].") for i, n in enumerate(_get(obj, "nodes", list, "", text)))
        inject = block(_get(obj, "inject", dict, "", text), "inject.")
        ci = _get(obj, "cell_index", dict, "", text)
        desc = CellDescription(nodes, inject, (_get(ci, "output", int, "cell_index.", text),
                                               _get(ci, "target", int, "cell_index.", text)))
        if desc.base != base or len(nodes) != 2 * base - 1:
            raise ArchParseError(f"base {base} needs {2 * base - 1} nodes, got {len(nodes)}", field="nodes")
        return desc
    raise ArchParseError(f"unknown family {family!r}", field="family")


def parse(text: str, space: SearchSpace | None = None) -> ArchDescription:
    """Inverse of :func:`serialize`.

    Without ``space`` the description is checked against the default space of
    its family, widened to every supported op and any filter/stride value.
    """
    desc = from_dict(load_profile_json(text), text)
    if space is None:
        if isinstance(desc, CellDescription):
            space = CellSearchSpace(COMBINERS, ACTIVATIONS, base=desc.base)
        else:
            vals = lambda name: tuple(sorted({getattr(l, name) for l in desc.layers} | {1}))
            space = ConvSearchSpace(vals("filter_height"), vals("filter_width"), vals("n_filters"),
                                    tuple(sorted({l.stride_height for l in desc.layers}
                                                 | {l.stride_width for l in desc.layers} | {1})),
                                    skip_connections=True, pool_after=desc.pool_after)
            bad = [(i, l) for i, l in enumerate(desc.layers)
                   if min(l.filter_height, l.filter_width, l.stride_height, l.stride_width, l.n_filters) < 1]
            if bad:
                raise ArchParseError("hyperparameters must be positive", field=f"layers[{bad[0][0]}]")
    problems = validate(desc, space)
    if problems:
        first = problems[0]
        line = _line_of(text, json.dumps(first.value)) if isinstance(first.value, str) else None
        raise ArchParseError(str(first), line=line, field=first.field)
    return desc


def load(path) -> ArchDescription:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def save(desc: ArchDescription, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(desc))


# --------------------------------------------------------------------------
# spaces as plain dicts (config files)


def space_to_dict(space: SearchSpace) -> dict:
    if isinstance(space, CellSearchSpace):
        return {"family": "cell", "combiners": list(space.combiners),
                "activations": list(space.activations), "base": space.base}
    return {"family": "conv", "filter_heights": list(space.filter_heights),
            "filter_widths": list(space.filter_widths), "num_filters": list(space.num_filters),
            "strides": list(space.strides), "skip_connections": space.skip_connections,
            "pool_after": list(space.pool_after)}


def space_from_dict(obj: dict) -> SearchSpace:
    obj = dict(obj)
    family = obj.pop("family", None)
    if family == "cell":
        space = CellSearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})
    elif family == "conv":
        space = ConvSearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})
    else:
        raise ValueError(f"space.family must be 'conv' or 'cell', got {family!r}")
    check_space(space)
    return space


def approx(n: int) -> str:
    """Compact scientific rendering of a big count."""
    e = int(math.floor(math.log10(n))) if n > 0 else 0
    return f"{n / 10**e:.4f}e{e}" if e > 5 else str(n)
