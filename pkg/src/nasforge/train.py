"""Train and evaluate child models; turn their validation metrics into rewards."""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import compiler, optim
from .arch import ArchDescription, CellDescription, ConvArch, serialize_compact
from .autodiff import backprop, run
from .compiler import CompiledGraph
from .reinforce import shape_reward_accuracy, shape_reward_perplexity
from .tasks import Split, Task

PPL_CAP = 1e6
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "momentum"  # "momentum" (Nesterov) or "adam"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    norm_epsilon: float = 1e-5
    decay_epoch: int | None = None
    decay_factor: float = 0.1
    grad_clip: float | None = None
    hidden_size: int | None = None  # recurrent children; None -> sized from param_budget
    param_budget: int = 4000
    eval_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


PRESETS = {
    "desk-image": TrainConfig(),
    "desk-sequence": TrainConfig(optimizer="adam", learning_rate=0.01, weight_decay=0.0, grad_clip=5.0),
    "paper-cifar": TrainConfig(epochs=50, batch_size=64),
    "paper-ptb": TrainConfig(epochs=35, optimizer="adam", learning_rate=0.001, weight_decay=0.0,
                             grad_clip=5.0, batch_size=20),
}


def default_config(task: Task, **overrides) -> TrainConfig:
    base = PRESETS["desk-sequence" if task.kind == "sequence-model" else "desk-image"]
    return replace(base, **overrides)


@dataclass
class EvalResult:
    history: list[float]  # validation metric per epoch
    metric: str
    test_metric: float | None = None
    wall_time: float = 0.0
    n_params: int = 0
    diverged: bool = False

    def best_recent(self, window: int = 5) -> float:
        tail = self.history[-window:]
        return max(tail) if self.metric == "accuracy" else min(tail)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# helpers


def _optimizer(config: TrainConfig) -> optim.OptimizerState:
    if config.optimizer == "adam":
        return optim.adam(config.learning_rate, weight_decay=config.weight_decay)
    if config.optimizer == "momentum":
        return optim.momentum(config.learning_rate, config.momentum, config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _lr(config: TrainConfig, epoch: int) -> float:
    if config.decay_epoch is not None and epoch >= config.decay_epoch:
        return config.learning_rate * config.decay_factor
    return config.learning_rate


def _worst(metric: str) -> float:
    return 0.0 if metric == "accuracy" else PPL_CAP


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for k in range(0, n - size + 1, size):
        yield perm[k : k + size]


def _onehot_seq(x: np.ndarray, vocab: int) -> np.ndarray:
    n, t = x.shape
    out = np.zeros((n, t, vocab))
    out[np.arange(n)[:, None], np.arange(t)[None, :], x] = 1.0
    return out.reshape(n, t * vocab)


def sequence_hidden_size(kind: str, base: int, vocab: int, config: TrainConfig) -> int:
    if config.hidden_size is not None:
        return config.hidden_size
    if kind == "lstm":
        return compiler.hidden_for_budget(config.param_budget, lambda h: compiler.lstm_param_count(vocab, h, vocab))
    return compiler.hidden_for_budget(config.param_budget,
                                      lambda h: compiler.cell_param_count(base, vocab, h, vocab))


# --------------------------------------------------------------------------
# model runners: each knows how to train one step and evaluate a split


class _ConvRunner:
    def __init__(self, compiled: CompiledGraph, task: Task, config: TrainConfig, rng):
        desc = compiled.meta["desc"]
        if tuple(compiled.meta["input_shape"]) != tuple(task.input_shape) or compiled.meta["n_classes"] != task.n_classes:
            raise ValueError(f"graph signature {compiled.meta['input_shape']}->{compiled.meta['n_classes']} "
                             f"does not match task {task.input_shape}->{task.n_classes}")
        self.task, self.config = task, config
        self.train_g = compiler.compile_conv(desc, task.input_shape, task.n_classes, batch=config.batch_size,
                                             training=True, eps=config.norm_epsilon, loss=True)
        self.eval_bs = config.eval_batch
        self.eval_g = compiler.compile_conv(desc, task.input_shape, task.n_classes, batch=self.eval_bs,
                                            training=False, eps=config.norm_epsilon)
        self.params = compiler.init_params(self.train_g.trainable, rng)
        self.buffers = {k: (np.zeros(s) if k.endswith(".mean") else np.ones(s))
                        for k, s in self.eval_g.manifest.items() if k in self.eval_g.buffers}
        self.bn_nodes = [(n.name[: -len(".bn")], n.inputs[0]) for n in self.train_g.graph.nodes if n.op == "batchnorm"]
        self.n_params = self.train_g.n_params()

    def step(self, split: Split, idx: np.ndarray, rng) -> tuple[float, dict]:
        x = split.x[idx]
        if self.task.augment is not None:
            x = self.task.augment(x, rng)
        g = self.train_g.graph
        values = run(g, self.params, {"image": x, "labels": split.y[idx].astype(float)})
        loss = float(values[g.outputs["loss"]])
        grads = backprop(g, values, {"loss": np.ones(())})
        for prefix, node in self.bn_nodes:
            flat = values[node].reshape(-1, values[node].shape[-1])
            for stat, val in ((".mean", flat.mean(axis=0)), (".var", flat.var(axis=0))):
                key = prefix + stat
                self.buffers[key] = BN_MOMENTUM * self.buffers[key] + (1 - BN_MOMENTUM) * val
        return loss, grads

    def evaluate(self, split: Split, params=None) -> float:
        params = dict(self.params if params is None else params, **self.buffers)
        correct = 0
        n = len(split)
        for k in range(0, n, self.eval_bs):
            x = split.x[k : k + self.eval_bs]
            m = len(x)
            if m < self.eval_bs:
                x = np.concatenate([x, np.zeros((self.eval_bs - m,) + x.shape[1:])])
            vals = run(self.eval_g.graph, params, {"image": x})
            logits = vals[self.eval_g.graph.outputs["logits"]][:m]
            correct += int((logits.argmax(axis=1) == split.y[k : k + m]).sum())
        return correct / n


class _SeqRunner:
    def __init__(self, compiled: CompiledGraph, task: Task, config: TrainConfig, rng):
        vocab = task.n_classes
        steps = task.input_shape[0]
        if compiled.kind not in ("cell", "lstm"):
            raise ValueError(f"sequence tasks need a recurrent cell graph, got {compiled.kind!r}")
        in_dim = compiled.graph.input_shapes()["x"][1]
        if in_dim != vocab:
            raise ValueError(f"cell input width {in_dim} does not match task vocabulary {vocab}")
        self.task, self.config, self.vocab, self.steps = task, config, vocab, steps
        self.train_g = compiler.compile_sequence_model(compiled, vocab, steps, config.batch_size)
        self.eval_bs = config.eval_batch
        self.eval_g = compiler.compile_sequence_model(compiled, vocab, steps, self.eval_bs)
        self.params = compiler.init_params(self.train_g.trainable, rng)
        if compiled.kind == "lstm":  # forget gate starts open
            hidden = compiled.meta["hidden_dim"]
            self.params["b"][hidden : 2 * hidden] = 1.0
        self.n_params = self.train_g.n_params()

    def _feeds(self, split: Split, idx, normalize: bool):
        y = split.y[idx]
        w = np.ones(y.shape) if split.mask is None else np.asarray(split.mask[idx], dtype=float)
        if normalize:
            w = w * (w.size / max(w.sum(), 1e-12))
        return {"x": _onehot_seq(split.x[idx], self.vocab), "y": y.reshape(-1).astype(float), "w": w.reshape(-1)}

    def step(self, split: Split, idx, rng):
        g = self.train_g.graph
        values = run(g, self.params, self._feeds(split, idx, normalize=True))
        loss = float(values[g.outputs["loss"]])
        return loss, backprop(g, values, {"loss": np.ones(())})

    def evaluate(self, split: Split, params=None) -> float:
        params = self.params if params is None else params
        total, weight = 0.0, 0.0
        n = len(split)
        for k in range(0, n, self.eval_bs):
            idx = np.arange(k, min(k + self.eval_bs, n))
            m = len(idx)
            feeds = self._feeds(split, idx, normalize=False)
            if m < self.eval_bs:
                pad = self.eval_bs - m
                feeds["x"] = np.concatenate([feeds["x"], np.zeros((pad, feeds["x"].shape[1]))])
                feeds["y"] = np.concatenate([feeds["y"], np.zeros(pad * self.steps)])
                feeds["w"] = np.concatenate([feeds["w"], np.zeros(pad * self.steps)])
            vals = run(self.eval_g.graph, params, feeds)
            total += float(vals[self.eval_g.graph.outputs["nll"]].sum())
            weight += float(feeds["w"].sum())
        mean = total / weight
        return float(np.exp(mean)) if np.isfinite(mean) and mean < np.log(PPL_CAP) else PPL_CAP


def _runner(compiled: CompiledGraph, task: Task, config: TrainConfig, rng):
    if task.kind == "image-classify":
        if compiled.kind != "conv":
            raise ValueError("image tasks need a compiled conv graph")
        return _ConvRunner(compiled, task, config, rng)
    if task.kind == "sequence-model":
        return _SeqRunner(compiled, task, config, rng)
    raise ValueError(f"task kind {task.kind!r} has nothing to train")


def _fit(compiled: CompiledGraph, task: Task, config: TrainConfig):
    """Train; returns (result, runner).  The runner holds the final parameters."""
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    runner = _runner(compiled, task, config, rng)
    opt = _optimizer(config)
    history: list[float] = []
    diverged = False
    with np.errstate(all="ignore"):
        for epoch in range(config.epochs):
            if not diverged:
                lr = _lr(config, epoch)
                for idx in _batches(len(task.train), config.batch_size, rng):
                    loss, grads = runner.step(task.train, idx, rng)
                    if not np.isfinite(loss):
                        diverged = True
                        break
                    grads = optim.clip_by_global_norm(grads, config.grad_clip)
                    try:
                        runner.params, opt = optim.apply_update(opt, runner.params, grads, lr=lr)
                    except optim.NonFiniteGradientError:
                        diverged = True
                        break
            if diverged:
                history.append(_worst(task.metric))
                continue
            val = runner.evaluate(task.valid)
            if not np.isfinite(val) or (task.metric == "perplexity" and val >= PPL_CAP):
                diverged = True
                val = _worst(task.metric)
            history.append(val)
    result = EvalResult(history, task.metric, wall_time=time.perf_counter() - start,
                        n_params=runner.n_params, diverged=diverged)
    return result, runner


def train_child(compiled: CompiledGraph, task: Task, config: TrainConfig) -> EvalResult:
    """Train from a fresh seeded init and report per-epoch validation metrics.

    Parameters are discarded afterwards.  A diverging run reports the worst
    metric (accuracy 0, perplexity ``PPL_CAP``) for its remaining epochs.
    """
    result, _ = _fit(compiled, task, config)
    return result


def compile_for_task(desc, task: Task, config: TrainConfig) -> CompiledGraph:
    """Compile a description (or the string "lstm") to match ``task``."""
    if task.kind == "image-classify":
        if not isinstance(desc, ConvArch):
            raise ValueError("image tasks need a conv description")
        return compiler.compile_conv(desc, task.input_shape, task.n_classes, eps=config.norm_epsilon)
    vocab = task.n_classes
    if desc == "lstm":
        return compiler.reference_lstm(vocab, sequence_hidden_size("lstm", 0, vocab, config))
    if not isinstance(desc, CellDescription):
        raise ValueError("sequence tasks need a cell description")
    return compiler.compile_cell(desc, vocab, sequence_hidden_size("cell", desc.base, vocab, config))


def reward_from(result: EvalResult, c: float = 80.0) -> tuple[float, float]:
    """(raw validation metric, shaped reward)."""
    raw = result.best_recent()
    if result.metric == "accuracy":
        return raw, shape_reward_accuracy(result.history)
    return raw, shape_reward_perplexity(raw, c)


class ChildEvaluator:
    """Callable used by the search loop: description + seed -> (raw, reward).

    With ``memo`` a description that was already trained reuses its first
    result instead of training again; useful when a converging controller
    keeps proposing the same few children.
    """

    def __init__(self, task: Task, config: TrainConfig | None = None, c: float = 80.0, memo: bool = False):
        self.task = task
        self.config = default_config(task) if config is None and task.kind != "landscape" else config
        self.c = c
        self.memo = memo
        self._seen: dict[str, tuple[float, float]] = {}
        self.trained = 0

    def __call__(self, desc: ArchDescription, seed: int) -> tuple[float, float]:
        if self.task.kind == "landscape":
            r = self.task.landscape(desc, np.random.default_rng(seed))
            return r, r
        key = serialize_compact(desc) if self.memo else None
        if key in self._seen:
            return self._seen[key]
        config = replace(self.config, seed=seed)
        result = train_child(compile_for_task(desc, self.task, config), self.task, config)
        self.trained += 1
        out = reward_from(result, self.c)
        if key is not None:
            self._seen[key] = out
        return out


# --------------------------------------------------------------------------
# grid search over the winner


GRID_KEYS = ("learning_rate", "weight_decay", "norm_epsilon", "decay_epoch")


def grid_search(desc, task: Task, grid: Mapping[str, list], base: TrainConfig | None = None):
    """Train every grid cell, pick the best validation metric, test the winner once.

    Returns (winning TrainConfig, its EvalResult with ``test_metric`` set,
    list of (config, result) for every cell).
    """
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}; allowed {GRID_KEYS}")
    base = default_config(task) if base is None else base
    keys = [k for k in GRID_KEYS if k in grid]
    if any(len(grid[k]) == 0 for k in keys):
        raise ValueError("grid axes must be non-empty")
    better = (lambda a, b: a > b) if task.metric == "accuracy" else (lambda a, b: a < b)
    cells = []
    best = None
    for combo in itertools.product(*(grid[k] for k in keys)):
        config = replace(base, **dict(zip(keys, combo)))
        result, runner = _fit(compile_for_task(desc, task, config), task, config)
        cells.append((config, result))
        score = result.best_recent()
        if best is None or better(score, best[0]):
            best = (score, config, result, runner)
    _, config, result, runner = best
    with np.errstate(all="ignore"):
        result.test_metric = runner.evaluate(task.test.open())
    return config, result, cells
