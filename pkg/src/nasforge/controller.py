"""Autoregressive LSTM policy that emits architecture tokens.

Every token class (filter height, combiner, cell index, ...) has its own
embedding table and softmax head.  A rollout feeds a learned start embedding
first; after each token step the embedding of the chosen token is the next
input.  Conv spaces with skip connections get one extra *anchor* step per
layer, right after the layer's last token.  At layer ``i`` the anchor step
scores each earlier layer ``j`` with

    sigmoid(v . tanh(h_j W_prev + h_i W_curr))

where ``h`` are top-layer hidden states at the anchor steps, and samples one
independent bit per earlier layer.  The step after an anchor consumes a learned
anchor embedding.

Rollouts are batched: ``batch`` trajectories advance together as rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .arch import (CellDescription, CellSearchSpace, ConvArch, ConvLayerSpec, ConvSearchSpace,
                   SearchSpace)
from .autodiff import GraphBuilder, backprop

Params = dict[str, np.ndarray]

HIDDEN = 35
LAYERS = 2
INIT_RANGE = 0.08


class IncompatibleParamsError(ValueError):
    """Controller head widths do not match the search space."""


@dataclass(frozen=True)
class Trajectory:
    actions: tuple  # int per token step, tuple of 0/1 per anchor step with >= 1 bit
    log_probs: tuple[float, ...]
    desc: object
    n_layers: int | None = None
    seed: int | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))

    def __len__(self) -> int:
        return len(self.actions)


# --------------------------------------------------------------------------
# plan


def token_classes(space: SearchSpace) -> dict[str, int]:
    """Token class -> number of choices."""
    if isinstance(space, CellSearchSpace):
        return {"combiner": len(space.combiners), "activation": len(space.activations),
                "cell_index": space.n_nodes}
    return {name: len(vals) for name, vals in space.token_lists()}


def plan(space: SearchSpace, n_layers: int | None = None) -> list[tuple[str, object]]:
    """Ordered steps: ("token", class) or ("anchor", layer index)."""
    if isinstance(space, CellSearchSpace):
        steps = [("token", "combiner"), ("token", "activation")] * (space.n_nodes + 1)
        return steps + [("token", "cell_index"), ("token", "cell_index")]
    if n_layers is None or n_layers < 1:
        raise ValueError("conv rollouts need n_layers >= 1")
    steps = []
    for i in range(n_layers):
        steps += [("token", name) for name, _ in space.token_lists()]
        if space.skip_connections:
            steps.append(("anchor", i))
    return steps


def n_actions(space: SearchSpace, n_layers: int | None = None) -> int:
    """Trajectory length T: token steps plus anchor steps that carry >= 1 bit."""
    return sum(1 for kind, arg in plan(space, n_layers) if kind == "token" or arg > 0)


# --------------------------------------------------------------------------
# parameters


def init_params(space: SearchSpace, rng: np.random.Generator, hidden: int = HIDDEN,
                layers: int = LAYERS, init_range: float = INIT_RANGE) -> Params:
    def u(*shape):
        return rng.uniform(-init_range, init_range, size=shape)

    p: Params = {}
    for l in range(layers):
        p[f"lstm{l}.Wx"] = u(hidden, 4 * hidden)
        p[f"lstm{l}.Wh"] = u(hidden, 4 * hidden)
        p[f"lstm{l}.b"] = u(4 * hidden)
    p["emb.start"] = u(1, hidden)
    for cls, n in token_classes(space).items():
        p[f"emb.{cls}"] = u(n, hidden)
        p[f"head.{cls}.W"] = u(hidden, n)
        p[f"head.{cls}.b"] = u(n)
    if isinstance(space, ConvSearchSpace) and space.skip_connections:
        p["emb.anchor"] = u(1, hidden)
        p["attn.W_prev"] = u(hidden, hidden)
        p["attn.W_curr"] = u(hidden, hidden)
        p["attn.v"] = u(hidden, 1)
    return p


def check_compatible(params: Mapping[str, np.ndarray], space: SearchSpace) -> None:
    for cls, n in token_classes(space).items():
        key = f"head.{cls}.W"
        if key not in params:
            raise IncompatibleParamsError(f"controller has no head for token class {cls!r}")
        if params[key].shape[1] != n:
            raise IncompatibleParamsError(
                f"head {cls!r} has width {params[key].shape[1]}, search space lists {n} choices")
    if isinstance(space, ConvSearchSpace) and space.skip_connections and "attn.v" not in params:
        raise IncompatibleParamsError("controller has no skip-connection attention parameters")


def n_lstm_layers(params: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.endswith(".Wx") and k.startswith("lstm"))


# --------------------------------------------------------------------------
# rollout


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Rollout:
    """Builds the controller graph step by step while evaluating it."""

    def __init__(self, params: Mapping[str, np.ndarray], batch: int):
        self.b = GraphBuilder(params=params)
        self.batch = batch
        self.hidden = params["emb.start"].shape[1]
        self.layers = n_lstm_layers(params)
        b = self.b
        zeros = b.const(np.zeros((batch, self.hidden)))
        self.state = [(zeros, zeros) for _ in range(self.layers)]
        self.x = b.matmul(b.const(np.ones((batch, 1))), b.param("emb.start", (1, self.hidden)))
        self.total = None  # running sum of per-row negative log-likelihoods

    def lstm_step(self) -> int:
        b, H = self.b, self.hidden
        inp = self.x
        new_state = []
        for l, (h, c) in enumerate(self.state):
            z = b.add(b.matmul(inp, b.param(f"lstm{l}.Wx", (H, 4 * H))),
                      b.matmul(h, b.param(f"lstm{l}.Wh", (H, 4 * H))))
            z = b.bias_add(z, b.param(f"lstm{l}.b", (4 * H,)))
            i, f, g, o = (b.slice(z, axis=-1, start=k * H, stop=(k + 1) * H) for k in range(4))
            c = b.add(b.mul(b.sigmoid(f), c), b.mul(b.sigmoid(i), b.tanh(g)))
            h = b.mul(b.sigmoid(o), b.tanh(c))
            new_state.append((h, c))
            inp = h
        self.state = new_state
        return inp

    def embed(self, cls: str, actions: np.ndarray, n: int) -> None:
        onehot = np.zeros((self.batch, n))
        onehot[np.arange(self.batch), actions] = 1.0
        self.x = self.b.matmul(self.b.const(onehot), self.b.param(f"emb.{cls}", (n, self.hidden)))

    def embed_anchor(self) -> None:
        b = self.b
        self.x = b.matmul(b.const(np.ones((self.batch, 1))), b.param("emb.anchor", (1, self.hidden)))

    def add_nll(self, node: int) -> None:
        self.total = node if self.total is None else self.b.add(self.total, node)


Chooser = Callable[[int, str, np.ndarray], np.ndarray]


def _rollout(params, space: SearchSpace, n_layers: int | None, batch: int, choose: Chooser):
    """Run the policy; ``choose(t, kind, probs)`` picks actions for all rows.

    Returns (builder, per-row action lists, per-row per-step log-probs, logp node).
    """
    check_compatible(params, space)
    ro = _Rollout(params, batch)
    b = ro.b
    classes = token_classes(space)
    actions: list[list] = [[] for _ in range(batch)]
    logps: list[list[float]] = [[] for _ in range(batch)]
    anchors: list[int] = []  # per layer: h_j @ W_prev
    H = ro.hidden
    t = 0
    for kind, arg in plan(space, n_layers):
        h = ro.lstm_step()
        if kind == "token":
            n = classes[arg]
            logits = b.bias_add(b.matmul(h, b.param(f"head.{arg}.W", (H, n))), b.param(f"head.{arg}.b", (n,)))
            probs = _softmax(b.value(logits))
            act = np.asarray(choose(t, "token", probs), dtype=np.intp)
            nll = b.softmax_xent(logits, b.const(act.astype(float)))
            ro.add_nll(nll)
            step_lp = -b.value(nll)
            for r in range(batch):
                actions[r].append(int(act[r]))
                logps[r].append(float(step_lp[r]))
            ro.embed(arg, act, n)
            t += 1
            continue
        # anchor step for layer ``arg``
        i = arg
        if i > 0:
            curr = b.matmul(h, b.param("attn.W_curr", (H, H)))
            v = b.param("attn.v", (H, 1))
            zs = [b.matmul(b.tanh(b.add(anchors[j], curr)), v) for j in range(i)]
            z = zs[0] if i == 1 else b.concat(*zs)  # (batch, i)
            probs = _sigmoid(b.value(z))
            bits = np.asarray(choose(t, "skip", probs), dtype=np.intp).reshape(batch, i)
            flat = b.reshape(z, shape=(batch * i, 1))
            logits = b.concat(b.const(np.zeros((batch * i, 1))), flat)
            nll = b.softmax_xent(logits, b.const(bits.reshape(-1).astype(float)))
            row_nll = b.reshape(b.matmul(b.reshape(nll, shape=(batch, i)), b.const(np.ones((i, 1)))),
                                shape=(batch,))
            ro.add_nll(row_nll)
            step_lp = -b.value(row_nll)
            for r in range(batch):
                actions[r].append(tuple(int(x) for x in bits[r]))
                logps[r].append(float(step_lp[r]))
            t += 1
        anchors.append(b.matmul(h, b.param("attn.W_prev", (H, H))))
        ro.embed_anchor()
    logp = b.scale(ro.total, factor=-1.0, name="logp")
    b.output("logp", logp)
    return b, actions, logps, logp


def decode(space: SearchSpace, actions: Sequence, n_layers: int | None = None):
    """Map an action sequence back to its description."""
    it = iter(actions)
    if isinstance(space, CellSearchSpace):
        blocks = [(space.combiners[next(it)], space.activations[next(it)]) for _ in range(space.n_nodes + 1)]
        out_i, tgt = next(it), next(it)
        return CellDescription(tuple(blocks[:-1]), blocks[-1], (out_i, tgt))
    layers = []
    for i in range(n_layers):
        vals = {name: opts[next(it)] for name, opts in space.token_lists()}
        if space.skip_connections:
            bits = next(it) if i > 0 else ()
            skips = tuple(j for j, bit in enumerate(bits) if bit)
        else:
            skips = (i - 1,) if i else ()
        layers.append(ConvLayerSpec(vals["filter_height"], vals["filter_width"],
                                    vals.get("stride_height", 1), vals.get("stride_width", 1),
                                    vals["num_filters"], skips))
    return ConvArch(tuple(layers), tuple(p for p in space.pool_after if p < n_layers))


def _sampler(rng: np.random.Generator) -> Chooser:
    def choose(t, kind, probs):
        u = rng.random(probs.shape[0]) if kind == "token" else rng.random(probs.shape)
        if kind == "token":
            cdf = np.cumsum(probs, axis=1)
            return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
        return (u < probs).astype(np.intp)
    return choose


def _greedy(t, kind, probs):
    if kind == "token":
        return probs.argmax(axis=1)
    return (probs >= 0.5).astype(np.intp)


def sample(params: Mapping[str, np.ndarray], space: SearchSpace, rng: np.random.Generator | None = None,
           n_layers: int | None = None, batch: int = 1, greedy: bool = False,
           seed: int | None = None) -> list[Trajectory]:
    """Draw ``batch`` trajectories (argmax / p >= 0.5 everywhere when ``greedy``)."""
    if isinstance(space, CellSearchSpace):
        n_layers = None
    if not greedy and rng is None:
        raise ValueError("sampling needs an explicit rng")
    choose = _greedy if greedy else _sampler(rng)
    _, actions, logps, _ = _rollout(params, space, n_layers, batch, choose)
    return [Trajectory(tuple(a), tuple(lp), decode(space, a, n_layers), n_layers, seed)
            for a, lp in zip(actions, logps)]


def sample_conv(params, space: ConvSearchSpace, n_layers: int, rng: np.random.Generator | None,
                greedy: bool = False) -> tuple[ConvArch, Trajectory]:
    traj = sample(params, space, rng, n_layers=n_layers, greedy=greedy)[0]
    return traj.desc, traj


def sample_cell(params, space: CellSearchSpace, rng: np.random.Generator | None,
                greedy: bool = False) -> tuple[CellDescription, Trajectory]:
    traj = sample(params, space, rng, greedy=greedy)[0]
    return traj.desc, traj


def _forced(trajs: Sequence[Trajectory]) -> Chooser:
    def choose(t, kind, probs):
        acts = [tr.actions[t] for tr in trajs]
        if kind == "skip":
            return np.array(acts, dtype=np.intp).reshape(probs.shape)
        return np.array(acts, dtype=np.intp)
    return choose


def log_prob(params: Mapping[str, np.ndarray], space: SearchSpace, trajectories: Sequence[Trajectory] | Trajectory,
             weights: Sequence[float] | None = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Recompute log-probabilities under ``params``.

    Returns (per-trajectory log-probs, gradient of sum_k weights[k] * logp_k).
    Weights default to ones.  Trajectories are grouped by length internally.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    trajectories = list(trajectories)
    w = np.ones(len(trajectories)) if weights is None else np.asarray(weights, dtype=float)
    out = np.zeros(len(trajectories))
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    groups: dict[int | None, list[int]] = {}
    for k, tr in enumerate(trajectories):
        groups.setdefault(tr.n_layers if isinstance(space, ConvSearchSpace) else None, []).append(k)
    for n_layers, idx in groups.items():
        members = [trajectories[k] for k in idx]
        expected = n_actions(space, n_layers)
        for tr in members:
            if len(tr.actions) != expected:
                raise IncompatibleParamsError(f"trajectory has {len(tr.actions)} actions, space implies {expected}")
        b, _, _, logp = _rollout(params, space, n_layers, len(members), _forced(members))
        graph = b.build()
        out[idx] = b.value(logp)
        g = backprop(graph, b.values, {"logp": w[idx]})
        for k, v in g.items():
            grads[k] += v
    return out, grads


def next_step_log_probs(params, space: SearchSpace, actions_prefix: Sequence, n_layers: int | None = None) -> np.ndarray:
    """Log-probabilities at the step that follows ``actions_prefix``."""
    steps = plan(space, n_layers)
    captured = {}
    t_target = len(actions_prefix)

    def choose(t, kind, probs):
        if t == t_target:
            captured["probs"] = probs
            raise _Stop
        a = actions_prefix[t]
        return np.array([a], dtype=np.intp).reshape(1, -1) if kind == "skip" else np.array([a])

    try:
        _rollout(params, space, n_layers, 1, choose)
    except _Stop:
        return np.log(captured["probs"][0])
    raise ValueError(f"no step after {len(actions_prefix)} actions (plan has {len(steps)} steps)")


class _Stop(Exception):
    pass


# --------------------------------------------------------------------------
# skip-connection attention on its own


def skip_logit_graph(hidden: int):
    b = GraphBuilder()
    hj = b.input("h_j", (1, hidden))
    hi = b.input("h_i", (1, hidden))
    z = b.matmul(b.tanh(b.add(b.matmul(hj, b.param("attn.W_prev", (hidden, hidden))),
                              b.matmul(hi, b.param("attn.W_curr", (hidden, hidden))))),
                 b.param("attn.v", (hidden, 1)))
    b.output("p", b.sigmoid(z))
    return b.build()


def skip_logit(params: Mapping[str, np.ndarray], h_j: np.ndarray, h_i: np.ndarray) -> float:
    """P(layer j feeds layer i) = sigmoid(v . tanh(h_j W_prev + h_i W_curr))."""
    from .autodiff import forward

    hidden = params["attn.W_prev"].shape[0]
    graph = skip_logit_graph(hidden)
    sub = {k: params[k] for k in ("attn.W_prev", "attn.W_curr", "attn.v")}
    out = forward(graph, sub, {"h_j": np.reshape(h_j, (1, hidden)), "h_i": np.reshape(h_i, (1, hidden))})
    return float(out["p"][0, 0])
