"""Central finite-difference checks for graphs."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Graph, backward, run

# ops whose derivative jumps where these predicates flip
_KINKS = {
    "relu": lambda vals: vals[0] > 0,
    "maximum": lambda vals: vals[0] >= vals[1],
}


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _evaluate(graph: Graph, params, inputs, weights) -> tuple[float, list[np.ndarray]]:
    values = run(graph, params, inputs)
    loss = float(sum(np.sum(values[graph.outputs[k]] * w) for k, w in weights.items()))
    pattern = [_KINKS[n.op]([values[i] for i in n.inputs]) for n in graph.nodes if n.op in _KINKS]
    return loss, pattern


def projected_loss(graph: Graph, params, inputs, weights: Mapping[str, np.ndarray]) -> float:
    return _evaluate(graph, params, inputs, weights)[0]


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class CheckReport(float):
    """Max relative error (a float) that also carries the number of skipped coordinates."""

    skipped: int = 0


def check_graph(graph: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
                rng: np.random.Generator, eps: float = 1e-5, max_coords: int | None = 40,
                include_inputs: bool = False, shrink: int = 3) -> CheckReport:
    """Max relative error between backward and central differences.

    Outputs are projected onto fixed random weights so every output element
    contributes.  At most ``max_coords`` coordinates are probed per tensor.
    A difference is only meaningful if neither probe crosses a relu or max
    kink; when one does, eps is divided by 10 (up to ``shrink`` times) and the
    coordinate is skipped if the kink is still within reach.
    """
    weights = {k: rng.standard_normal(s) for k, s in graph.output_shapes().items()}
    grads = backward(graph, params, inputs, upstream=weights, wrt_inputs=include_inputs)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    inputs = {k: np.array(v, dtype=float) for k, v in inputs.items()}
    _, base = _evaluate(graph, params, inputs, weights)
    targets = [("param", k) for k in graph.params]
    if include_inputs:
        targets += [("input", k) for k in graph.inputs]
    worst, skipped = 0.0, 0
    for kind, key in targets:
        table = params if kind == "param" else inputs
        flat = table[key].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g = grads[key].reshape(-1)
        for c in coords:
            orig = flat[c]
            h = eps
            for _ in range(shrink + 1):
                flat[c] = orig + h
                up, p_up = _evaluate(graph, params, inputs, weights)
                flat[c] = orig - h
                down, p_down = _evaluate(graph, params, inputs, weights)
                flat[c] = orig
                if _same(p_up, base) and _same(p_down, base):
                    worst = max(worst, float(relative_error(g[c], (up - down) / (2 * h))))
                    break
                h /= 10
            else:
                skipped += 1
    out = CheckReport(worst)
    out.skipped = skipped
    return out
