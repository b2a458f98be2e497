"""Simulated parameter-server search: shards hold the controller, replicas sample and push.

Everything runs in one process.  In deterministic-replay mode replicas are
state machines stepped in a seeded random total order (logical clock), so a
run is exactly reproducible; otherwise each replica is a thread and children
train on a shared worker pool.
"""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import controller, optim
from .arch import ArchDescription, ConvSearchSpace, SearchSpace, sample_uniform, serialize_compact
from .reinforce import BaselineState, RewardRecord, policy_gradient, update_baseline
from .searchlog import EventRecord, SampleRecord, SearchLog

log = logging.getLogger(__name__)

Evaluator = Callable[[ArchDescription, int], tuple[float, float]]
SEED_SPACE = 2**32


@dataclass(frozen=True)
class ClusterConfig:
    shards: int = 1
    replicas: int = 1
    batch: int = 8  # children per replica step (m)
    threshold: int = 1  # messages accumulated before the server updates
    workers: int = 1  # child-training pool size (async mode)
    deterministic: bool = True
    seed: int = 0
    staleness: int | None = None  # max version lag accepted; None = unbounded
    learning_rate: float = 0.0006
    clip: float | None = 5.0
    baseline_decay: float = 0.95
    crash_prob: float = 0.0  # per replica step, simulated replica failure

    def __post_init__(self):
        for name in ("shards", "replicas", "batch", "threshold", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.staleness is not None and self.staleness < 0:
            raise ValueError("staleness must be >= 0")
        if not 0.0 <= self.crash_prob < 1.0:
            raise ValueError("crash_prob must lie in [0, 1)")


# Cluster shapes from the original large-scale runs; far beyond a desk, kept for reference.
FULL_SCALE_CIFAR = ClusterConfig(shards=20, replicas=100, batch=8, workers=800, deterministic=False)
FULL_SCALE_PTB = ClusterConfig(shards=20, replicas=400, batch=1, threshold=10, workers=400, deterministic=False)


def depth_schedule(samples_consumed: int, start: int = 6, step: int = 2, every: int = 1600) -> int:
    if samples_consumed < 0:
        raise ValueError("samples_consumed must be >= 0")
    return start + step * (samples_consumed // every)


@dataclass(frozen=True)
class DepthSchedule:
    start: int = 6
    step: int = 2
    every: int = 1600

    def __call__(self, samples_consumed: int) -> int:
        return depth_schedule(samples_consumed, self.start, self.step, self.every)


# --------------------------------------------------------------------------
# shards


class ShardMap:
    """Round-robin assignment of sorted slot names to ``n_shards`` shards."""

    def __init__(self, slots: Sequence[str], n_shards: int):
        if n_shards < 1:
            raise ValueError("need at least one shard")
        self.n_shards = n_shards
        self.assignment = {slot: i % n_shards for i, slot in enumerate(sorted(slots))}

    def shard_of(self, slot: str) -> int:
        return self.assignment[slot]

    def slots_of(self, shard: int) -> list[str]:
        return [s for s, k in self.assignment.items() if k == shard]

    def split(self, tensors: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], ...]:
        if set(tensors) != set(self.assignment):
            raise ValueError("tensor slots do not match the shard map")
        parts: tuple[dict, ...] = tuple({} for _ in range(self.n_shards))
        for slot, value in tensors.items():
            parts[self.assignment[slot]][slot] = value
        return parts

    def check(self, parts: Sequence[Mapping[str, np.ndarray]]) -> None:
        if len(parts) != self.n_shards:
            raise ValueError(f"expected {self.n_shards} shard parts, got {len(parts)}")
        for k, part in enumerate(parts):
            if set(part) != set(self.slots_of(k)):
                raise ValueError(f"shard {k} part does not match its slot partition")


@dataclass(frozen=True)
class Snapshot:
    version: int
    params: dict[str, np.ndarray]
    baseline: float


@dataclass(frozen=True)
class GradientMsg:
    replica: int
    parts: tuple[dict[str, np.ndarray], ...]  # ascent direction, one dict per shard
    rewards: tuple[RewardRecord, ...]
    version: int


class _Shard:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params = {k: v.copy() for k, v in params.items()}
        self.opt = optim.adam(lr)


class ParameterServer:
    def __init__(self, params: Mapping[str, np.ndarray], shard_map: ShardMap, learning_rate: float = 0.0006,
                 threshold: int = 1, staleness: int | None = None, baseline_decay: float = 0.95):
        self.map = shard_map
        self.shards = [_Shard({k: np.asarray(params[k], dtype=float) for k in shard_map.slots_of(s)}, learning_rate)
                       for s in range(shard_map.n_shards)]
        self.threshold = threshold
        self.staleness = staleness
        self.baseline = BaselineState(decay=baseline_decay)
        self.version = 0
        self.dropped_stale = 0
        self.updates = 0
        self._pending: list[GradientMsg] = []
        self._lock = threading.Lock()

    @property
    def params(self) -> dict[str, np.ndarray]:
        with self._lock:
            return self._merged()

    def _merged(self) -> dict[str, np.ndarray]:
        out = {}
        for shard in self.shards:
            out.update({k: v.copy() for k, v in shard.params.items()})
        return out

    def pull(self, replica: int | None = None) -> Snapshot:
        """All shards at a single version; never a torn read."""
        with self._lock:
            return Snapshot(self.version, self._merged(), self.baseline.value)

    def push(self, msg: GradientMsg) -> bool:
        """Returns False when the message was dropped as stale."""
        self.map.check(msg.parts)
        with self._lock:
            if self.staleness is not None and self.version - msg.version > self.staleness:
                self.dropped_stale += 1
                return False
            for rec in msg.rewards:
                self.baseline = update_baseline(self.baseline, rec.reward)
            self._pending.append(msg)
            if len(self._pending) >= self.threshold:
                n = len(self._pending)
                for k, shard in enumerate(self.shards):
                    total = dict(self._pending[0].parts[k])
                    for m in self._pending[1:]:
                        total = {slot: g + m.parts[k][slot] for slot, g in total.items()}
                    descent = {slot: -(g / n) for slot, g in total.items()}
                    shard.params, shard.opt = optim.apply_update(shard.opt, shard.params, descent)
                self._pending = []
                self.version += 1
                self.updates += 1
            return True


# --------------------------------------------------------------------------
# replicas


@dataclass
class SearchResult:
    log: SearchLog
    params: dict[str, np.ndarray]
    version: int
    baseline: float
    dropped_stale: int = 0
    stats: dict = field(default_factory=dict)


class _Replay:
    """Answers already-logged samples from a previous run's log."""

    def __init__(self, evaluator: Evaluator, previous: SearchLog | None):
        self.evaluator = evaluator
        self.table = {} if previous is None else {r.sample: r for r in previous.samples}
        self.replayed = 0

    def __call__(self, sample: int, desc: ArchDescription, seed: int) -> tuple[float, float]:
        rec = self.table.get(sample)
        if rec is not None and rec.desc == serialize_compact(desc):
            self.replayed += 1
            return rec.raw, rec.reward
        return self.evaluator(desc, seed)


class _Quota:
    def __init__(self, budget: int):
        self.budget = budget
        self.issued = 0
        self.partial_logged = False
        self._lock = threading.Lock()

    def take(self, m: int) -> int | None:
        """Start index of a batch of ``m`` samples, or None when the budget is spent."""
        with self._lock:
            if self.budget - self.issued < m:
                return None
            start = self.issued
            self.issued += m
            return start


@dataclass
class _InFlight:
    msg: GradientMsg
    records: list[SampleRecord]


def _n_layers(space: SearchSpace, schedule, issued_before: int) -> int | None:
    if not isinstance(space, ConvSearchSpace):
        return None
    return schedule(issued_before) if schedule is not None else depth_schedule(issued_before)


def _replica_step(replica: int, rng: np.random.Generator, server: ParameterServer, space: SearchSpace,
                  cluster: ClusterConfig, quota: _Quota, schedule, evaluate: Callable, t_pull: Callable,
                  evaluate_batch: Callable | None = None):
    """Pull, sample, evaluate, build the message.  Returns None when out of budget."""
    snap = server.pull(replica)
    start = quota.take(cluster.batch)
    if start is None:
        return None
    t0 = t_pull()
    depth = _n_layers(space, schedule, start)
    trajs = controller.sample(snap.params, space, rng, n_layers=depth, batch=cluster.batch)
    seeds = [int(s) for s in rng.integers(0, SEED_SPACE, size=cluster.batch)]
    jobs = [(start + i, tr.desc, s) for i, (tr, s) in enumerate(zip(trajs, seeds))]
    if evaluate_batch is not None:
        results = evaluate_batch(jobs)
    else:
        results = [evaluate(*job) for job in jobs]
    raws = [r[0] for r in results]
    rewards = [r[1] for r in results]
    grads = policy_gradient(snap.params, space, trajs, rewards, snap.baseline)
    grads = optim.clip_by_global_norm(grads, cluster.clip)
    recs = tuple(RewardRecord(raw, rew, snap.baseline, start + i, replica) for i, (raw, rew) in enumerate(results))
    msg = GradientMsg(replica, server.map.split(grads), recs, snap.version)
    records = [SampleRecord(start + i, replica, snap.version, serialize_compact(tr.desc), float(raws[i]),
                            float(rewards[i]), float(snap.baseline), depth, t0, 0.0)
               for i, tr in enumerate(trajs)]
    return _InFlight(msg, records)


def _deliver(flight: _InFlight, server: ParameterServer, out: SearchLog, t_push: float) -> None:
    ok = server.push(flight.msg)
    for rec in flight.records:
        out.add_sample(SampleRecord(**{**rec.__dict__, "t_push": t_push, "applied": ok}))
    if not ok:
        out.add_event(EventRecord("stale-drop", flight.msg.replica,
                                  f"gradient from version {flight.msg.version} dropped", t_push))


def run_search(cluster: ClusterConfig, space: SearchSpace, evaluator: Evaluator, budget: int,
               schedule: Callable[[int], int] | None = None, log_path=None,
               previous: SearchLog | None = None, meta: dict | None = None) -> SearchResult:
    """Search until ``budget`` samples have been issued.

    ``evaluator(desc, seed) -> (raw, reward)`` trains (or scores) one child.
    ``previous`` is the log of an interrupted run with the same settings; its
    samples are replayed instead of retrained.
    """
    if budget < cluster.batch:
        raise ValueError(f"budget {budget} is smaller than the batch size {cluster.batch}")
    params0 = controller.init_params(space, np.random.default_rng(cluster.seed))
    server = ParameterServer(params0, ShardMap(list(params0), cluster.shards), cluster.learning_rate,
                             cluster.threshold, cluster.staleness, cluster.baseline_decay)
    out = SearchLog()
    if log_path is not None:
        out.open(log_path, meta)
    else:
        out.meta = dict(meta or {})
    replay = _Replay(evaluator, previous)
    quota = _Quota(budget)
    rngs = [np.random.default_rng([cluster.seed, r + 1]) for r in range(cluster.replicas)]
    crashes = 0

    if cluster.deterministic:
        clock = [0]

        def tick() -> float:
            t = clock[0]
            clock[0] += 1
            return float(t)

        order = np.random.default_rng([cluster.seed, 0])
        inflight: dict[int, _InFlight | None] = {r: None for r in range(cluster.replicas)}
        active = list(range(cluster.replicas))
        while active:
            r = active[int(order.integers(len(active)))] if len(active) > 1 else active[0]
            if inflight[r] is None:
                flight = _replica_step(r, rngs[r], server, space, cluster, quota, schedule, replay, tick)
                if flight is None:
                    active.remove(r)
                    continue
                if cluster.crash_prob and rngs[r].random() < cluster.crash_prob:
                    crashes += 1
                    out.add_event(EventRecord("crash", r, f"batch of {len(flight.records)} dropped", tick()))
                    continue
                inflight[r] = flight
            else:
                _deliver(inflight[r], server, out, tick())
                inflight[r] = None
    else:
        t_start = time.perf_counter()
        log_lock = threading.Lock()

        def now() -> float:
            return time.perf_counter() - t_start

        pool = ThreadPoolExecutor(max_workers=cluster.workers)

        def evaluate_batch(jobs):
            return list(pool.map(lambda job: replay(*job), jobs))

        def worker(r: int):
            nonlocal crashes
            while True:
                flight = _replica_step(r, rngs[r], server, space, cluster, quota, schedule, replay, now,
                                       evaluate_batch)
                if flight is None:
                    return
                with log_lock:
                    if cluster.crash_prob and rngs[r].random() < cluster.crash_prob:
                        crashes += 1
                        out.add_event(EventRecord("crash", r, f"batch of {len(flight.records)} dropped", now()))
                        continue
                    _deliver(flight, server, out, now())

        threads = [threading.Thread(target=worker, args=(r,), name=f"replica-{r}") for r in range(cluster.replicas)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        pool.shutdown()

    left = budget - quota.issued
    if left:
        out.add_event(EventRecord("partial-batch", None, f"{left} samples short of a full batch; not issued",
                                  float(len(out.samples))))
        log.info("dropped final partial batch of %d samples", left)
    if replay.replayed:
        out.add_event(EventRecord("resume", None, f"{replay.replayed} samples replayed from the previous log",
                                  float(len(out.samples))))
    return SearchResult(out, server.params, server.version, server.baseline.value, server.dropped_stale,
                        {"issued": quota.issued, "updates": server.updates, "crashes": crashes,
                         "replayed": replay.replayed})


def serial_search(space: SearchSpace, evaluator: Evaluator, budget: int, batch: int = 8, seed: int = 0,
                  learning_rate: float = 0.0006, clip: float | None = 5.0, baseline_decay: float = 0.95,
                  schedule: Callable[[int], int] | None = None) -> SearchResult:
    """Single-process reference loop: sample, evaluate, one Adam step per batch."""
    params = controller.init_params(space, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, 1])
    opt = optim.adam(learning_rate)
    baseline = BaselineState(decay=baseline_decay)
    out = SearchLog()
    version = 0
    for b in range(budget // batch):
        start = b * batch
        depth = _n_layers(space, schedule, start)
        trajs = controller.sample(params, space, rng, n_layers=depth, batch=batch)
        seeds = [int(s) for s in rng.integers(0, SEED_SPACE, size=batch)]
        results = [evaluator(tr.desc, s) for tr, s in zip(trajs, seeds)]
        rewards = [r[1] for r in results]
        b_used = baseline.value
        grads = optim.clip_by_global_norm(policy_gradient(params, space, trajs, rewards, b_used), clip)
        for i, tr in enumerate(trajs):
            out.add_sample(SampleRecord(start + i, 0, version, serialize_compact(tr.desc), float(results[i][0]),
                                        float(rewards[i]), float(b_used), depth, float(2 * b), float(2 * b + 1)))
        for r in rewards:
            baseline = update_baseline(baseline, r)
        params, opt = optim.apply_update(opt, params, {k: -g for k, g in grads.items()})
        version += 1
    left = budget - (budget // batch) * batch
    if left:
        out.add_event(EventRecord("partial-batch", None, f"{left} samples short of a full batch; not issued",
                                  float(len(out.samples))))
    return SearchResult(out, params, version, baseline.value, 0, {"issued": budget - left, "updates": version})


def random_search(space: SearchSpace, evaluator: Evaluator, budget: int, seed: int = 0,
                  schedule: Callable[[int], int] | None = None, log_path=None,
                  previous: SearchLog | None = None, meta: dict | None = None) -> SearchLog:
    """Uniform sampling with the same evaluation and record format as the controller search."""
    out = SearchLog()
    if log_path is not None:
        out.open(log_path, meta)
    else:
        out.meta = dict(meta or {})
    replay = _Replay(evaluator, previous)
    rng = np.random.default_rng([seed, 2**31])
    for i in range(budget):
        depth = _n_layers(space, schedule, i)
        desc = sample_uniform(space, rng, depth=depth)
        child_seed = int(rng.integers(0, SEED_SPACE))
        raw, reward = replay(i, desc, child_seed)
        out.add_sample(SampleRecord(i, 0, 0, serialize_compact(desc), float(raw), float(reward), 0.0, depth,
                                    float(i), float(i)))
    if replay.replayed:
        out.add_event(EventRecord("resume", None, f"{replay.replayed} samples replayed from the previous log",
                                  float(budget)))
    return out


def greedy_architecture(params: Mapping[str, np.ndarray], space: SearchSpace, n_layers: int | None = None):
    return controller.sample(params, space, greedy=True, n_layers=n_layers)[0].desc
