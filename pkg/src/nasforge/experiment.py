"""Experiment configs, the search / random-search drivers and their reports."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arch
from .arch import ArchParseError, ConvSearchSpace, SearchSpace
from .distributed import ClusterConfig, DepthSchedule, greedy_architecture, random_search, run_search
from .searchlog import SearchLog, best_architectures, compare_curves, top_k_curve
from .tasks import Task, builtin_tasks
from .train import PRESETS, ChildEvaluator, TrainConfig, default_config

CONFIG_FORMAT = "nasforge.config"
REPORT_FORMAT = "nasforge.report"
REPORT_VERSION = 1
FORMAT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    space: SearchSpace = arch.CellSearchSpace(base=2)
    task: str = "rigged"
    task_options: dict = field(default_factory=dict)
    cluster: ClusterConfig = ClusterConfig(deterministic=False)
    schedule: DepthSchedule = DepthSchedule()
    budget: int = 200
    seed: int = 0
    train_preset: str | None = None
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    memo: bool = False
    top_k: int = 5
    window: int = 400
    reward_c: float = 80.0

    def __post_init__(self):
        if self.budget <= 0:
            raise ConfigError("budget", "must be > 0")
        if self.task not in builtin_tasks():
            raise ConfigError("task", f"unknown task {self.task!r}; known: {sorted(builtin_tasks())}")
        if self.train_preset is not None and self.train_preset not in PRESETS:
            raise ConfigError("train_preset", f"unknown preset {self.train_preset!r}; known: {sorted(PRESETS)}")
        if self.top_k < 1:
            raise ConfigError("top_k", "must be >= 1")
        if self.window < 1:
            raise ConfigError("window", "must be >= 1")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, cluster=dataclasses.replace(self.cluster, seed=seed))

    def to_dict(self) -> dict:
        out = {"format": CONFIG_FORMAT, "version": FORMAT_VERSION, "space": arch.space_to_dict(self.space),
               "task": self.task, "task_options": dict(self.task_options),
               "cluster": dataclasses.asdict(self.cluster), "schedule": dataclasses.asdict(self.schedule),
               "budget": self.budget, "seed": self.seed, "train_preset": self.train_preset,
               "train": dict(self.train), "memo": self.memo, "top_k": self.top_k, "window": self.window,
               "reward_c": self.reward_c}
        return out


_TOP_KEYS = {"format", "version", "space", "task", "task_options", "cluster", "schedule", "budget", "seed",
             "train_preset", "train", "memo", "top_k", "window", "reward_c"}


def _section(obj: dict, name: str, cls):
    sub = obj.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in sub:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    try:
        return cls(**sub)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<top>", "config must be an object")
    if obj.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
        raise ConfigError("format", f"expected {CONFIG_FORMAT!r}")
    if obj.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ConfigError("version", f"unsupported version {obj.get('version')!r}")
    for key in obj:
        if key not in _TOP_KEYS:
            raise ConfigError(key, "unknown field")
    kw = {}
    if "space" in obj:
        try:
            kw["space"] = arch.space_from_dict(obj["space"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("space", str(exc)) from None
    if "cluster" in obj:
        kw["cluster"] = _section(obj, "cluster", ClusterConfig)
    if "schedule" in obj:
        kw["schedule"] = _section(obj, "schedule", DepthSchedule)
    if "train" in obj:
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        if not isinstance(obj["train"], dict):
            raise ConfigError("train", "must be an object")
        for key in obj["train"]:
            if key not in known:
                raise ConfigError(f"train.{key}", "unknown field")
        kw["train"] = dict(obj["train"])
    types = {"task": str, "budget": int, "seed": int, "memo": bool, "top_k": int, "window": int,
             "reward_c": (int, float), "task_options": dict, "train_preset": (str, type(None))}
    for key, kind in types.items():
        if key in obj:
            val = obj[key]
            if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
                raise ConfigError(key, f"wrong type {type(val).__name__}")
            kw[key] = val
    cfg = ExperimentConfig(**kw)
    if "seed" in obj and "seed" not in obj.get("cluster", {}):
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a config file in the restricted JSON profile (reals allowed)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = arch.load_profile_json(text, allow_reals=True)
    except ArchParseError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return config_from_dict(obj)


# --------------------------------------------------------------------------
# building blocks


def build_task(cfg: ExperimentConfig) -> Task:
    entry = builtin_tasks()[cfg.task]
    opts = dict(cfg.task_options)
    if cfg.task == "rigged":
        opts.setdefault("seed", cfg.seed)
        if isinstance(cfg.space, ConvSearchSpace):
            opts.setdefault("n_layers", cfg.schedule.start)
        task = entry.load(cfg.space, **opts)
    else:
        opts.setdefault("seed", cfg.seed)
        try:
            task = entry.load(**opts)
        except TypeError as exc:
            raise ConfigError("task_options", str(exc)) from None
    if task is None:
        raise ConfigError("task", f"task {cfg.task!r} is not available ({entry.description})")
    return task


def train_config(cfg: ExperimentConfig, task: Task) -> TrainConfig | None:
    if task.kind == "landscape":
        return None
    base = PRESETS[cfg.train_preset] if cfg.train_preset else default_config(task)
    try:
        return dataclasses.replace(base, **cfg.train)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None


def build_evaluator(cfg: ExperimentConfig, task: Task) -> ChildEvaluator:
    return ChildEvaluator(task, train_config(cfg, task), cfg.reward_c, memo=cfg.memo)


def _schedule(cfg: ExperimentConfig, task: Task):
    land = task.landscape
    if land is not None and land.n_layers is not None:
        return lambda samples: land.n_layers
    return cfg.schedule


# --------------------------------------------------------------------------
# reports


def make_report(kind: str, cfg: ExperimentConfig, log: SearchLog, greedy=None, extra: dict | None = None) -> dict:
    best = best_architectures(log, cfg.top_k)
    rewards = [r.reward for r in log.samples]
    return {
        "format": REPORT_FORMAT, "version": REPORT_VERSION, "kind": kind,
        "task": cfg.task, "budget": cfg.budget, "seed": cfg.seed, "n_samples": len(log.samples),
        "best": [{"sample": r.sample, "raw": r.raw, "reward": r.reward, "desc": json.loads(r.desc)} for r in best],
        "curve": {"k": cfg.top_k, "window": cfg.window, "top_k": top_k_curve(rewards, cfg.top_k, cfg.window)},
        "greedy": None if greedy is None else arch.to_dict(greedy),
        "extra": extra or {},
    }


def read_report(path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a report")
    if obj.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report version {obj.get('version')!r}")
    return obj


def curve_tsv(points: list[float], window: int, total: int, header: str) -> str:
    lines = [f"window\tsamples\t{header}"]
    for i, v in enumerate(points):
        lines.append(f"{i}\t{min((i + 1) * window, total)}\t{v:.6f}")
    return "\n".join(lines) + "\n"


def write_outputs(out_dir, name: str, report: dict, greedy=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    curve = report["curve"]
    (out / f"{name}.curve.tsv").write_text(
        curve_tsv(curve["top_k"], curve["window"], report["n_samples"], f"top{curve['k']}_mean"), encoding="utf-8")
    if report["best"]:
        best = arch.from_dict(report["best"][0]["desc"])
        arch.save(best, out / f"{name}.best.arch.json")
    if greedy is not None:
        arch.save(greedy, out / f"{name}.greedy.arch.json")


# --------------------------------------------------------------------------
# drivers


def _previous(log_path: Path | None, resume: bool) -> SearchLog | None:
    if resume and log_path is not None and log_path.exists():
        return SearchLog.read(log_path)
    return None


def run_nas(cfg: ExperimentConfig, out_dir=None, resume: bool = False, greedy_final: bool = False):
    """Controller search.  Returns (report dict, SearchResult)."""
    task = build_task(cfg)
    evaluator = build_evaluator(cfg, task)
    log_path = Path(out_dir) / "search.log.jsonl" if out_dir is not None else None
    previous = _previous(log_path, resume)
    schedule = _schedule(cfg, task)
    result = run_search(cfg.cluster, cfg.space, evaluator, cfg.budget, schedule, log_path, previous,
                        meta={"config": cfg.to_dict(), "kind": "search"})
    greedy = None
    if greedy_final:
        depth = schedule(result.stats["issued"]) if isinstance(cfg.space, ConvSearchSpace) else None
        greedy = greedy_architecture(result.params, cfg.space, depth)
    extra = {"updates": result.stats["updates"], "dropped_stale": result.dropped_stale,
             "replayed": result.stats["replayed"]}
    report = make_report("search", cfg, result.log, greedy, extra)
    if out_dir is not None:
        write_outputs(out_dir, "search", report, greedy)
    return report, result


def run_random(cfg: ExperimentConfig, out_dir=None, resume: bool = False):
    task = build_task(cfg)
    evaluator = build_evaluator(cfg, task)
    log_path = Path(out_dir) / "randsearch.log.jsonl" if out_dir is not None else None
    previous = _previous(log_path, resume)
    log = random_search(cfg.space, evaluator, cfg.budget, cfg.seed, _schedule(cfg, task), log_path, previous,
                        meta={"config": cfg.to_dict(), "kind": "randsearch"})
    report = make_report("randsearch", cfg, log)
    if out_dir is not None:
        write_outputs(out_dir, "randsearch", report)
    return report, log


def compare_logs(nas: SearchLog, rand: SearchLog, k: int = 5, window: int = 400) -> dict:
    diff = compare_curves(nas.rewards(), rand.rewards(), k, window)
    n = min(len(nas), len(rand))
    return {"format": REPORT_FORMAT, "version": REPORT_VERSION, "kind": "compare", "k": k, "window": window,
            "n_samples": n, "n_points": math.ceil(n / window),
            "nas_top_k": top_k_curve(nas.rewards()[:n], k, window),
            "random_top_k": top_k_curve(rand.rewards()[:n], k, window), "difference": diff}


def compare_tsv(report: dict) -> str:
    lines = ["window\tsamples\tnas_top_k\trandom_top_k\tdifference"]
    w, n = report["window"], report["n_samples"]
    for i, (a, b, d) in enumerate(zip(report["nas_top_k"], report["random_top_k"], report["difference"])):
        lines.append(f"{i}\t{min((i + 1) * w, n)}\t{a:.6f}\t{b:.6f}\t{d:.6f}")
    return "\n".join(lines) + "\n"


def mean_top_k(log: SearchLog, k: int) -> float:
    return float(np.mean([r.reward for r in best_architectures(log, k)]))
