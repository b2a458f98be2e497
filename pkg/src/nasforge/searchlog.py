"""Append-only search records and log analysis."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arch import ArchDescription, load_profile_json, from_dict, serialize_compact

LOG_FORMAT = "nasforge.searchlog"
LOG_VERSION = 1


@dataclass(frozen=True)
class SampleRecord:
    sample: int  # global index in issue order
    replica: int
    version: int  # controller params version the sample was drawn from
    desc: str  # compact serialized description
    raw: float
    reward: float
    baseline: float  # value subtracted for this sample's gradient
    depth: int | None
    t_pull: float
    t_push: float
    applied: bool = True  # False when the gradient was dropped as stale

    def description(self) -> ArchDescription:
        return from_dict(load_profile_json(self.desc, allow_reals=True), self.desc)


@dataclass(frozen=True)
class EventRecord:
    kind: str  # "stale-drop" | "crash" | "partial-batch" | "resume"
    replica: int | None
    detail: str
    t: float


@dataclass
class SearchLog:
    samples: list[SampleRecord] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)

    # -- writing ----------------------------------------------------------

    def open(self, path, meta: dict | None = None) -> "SearchLog":
        """Start a fresh file (header line first)."""
        self.path = Path(path)
        self.meta = dict(meta or {})
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION, "meta": self.meta}) + "\n")
        return self

    def _append_line(self, obj: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")

    def add_sample(self, rec: SampleRecord) -> None:
        self.samples.append(rec)
        self._append_line({"type": "sample", **asdict(rec)})

    def add_event(self, rec: EventRecord) -> None:
        self.events.append(rec)
        self._append_line({"type": "event", **asdict(rec)})

    def n_lines(self) -> int:
        return len(self.samples) + len(self.events)

    # -- reading ----------------------------------------------------------

    @classmethod
    def read(cls, path, max_lines: int | None = None) -> "SearchLog":
        """Load a log file; ``max_lines`` counts records after the header."""
        path = Path(path)
        log = cls(path=path)
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            try:
                head = json.loads(header)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}: not a search log") from err
            if head.get("format") != LOG_FORMAT:
                raise ValueError(f"{path}: not a search log")
            if head.get("version") != LOG_VERSION:
                raise ValueError(f"{path}: unsupported search log version {head.get('version')!r}")
            log.meta = head.get("meta", {})
            for k, line in enumerate(fh):
                if max_lines is not None and k >= max_lines:
                    break
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    if not line.endswith("\n"):  # torn final write of an interrupted run
                        break
                    raise ValueError(f"{path}: corrupt record on line {k + 2}") from None
                kind = obj.pop("type")
                if kind == "sample":
                    log.samples.append(SampleRecord(**obj))
                elif kind == "event":
                    log.events.append(EventRecord(**obj))
                else:
                    raise ValueError(f"{path}: unknown record type {kind!r}")
        return log

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.samples])


def best_architectures(log: SearchLog | Sequence[SampleRecord], k: int) -> list[SampleRecord]:
    """Top ``k`` records by reward, ties broken by earliest sample."""
    samples = log.samples if isinstance(log, SearchLog) else list(log)
    if not samples:
        raise ValueError("log is empty")
    order = sorted(samples, key=lambda r: (-r.reward, r.sample))
    return order[:k]


def top_k_curve(rewards: Sequence[float], k: int, window: int = 400) -> list[float]:
    """Mean of the best ``k`` rewards seen so far, at the end of every window.

    A trailing partial window contributes a final point.
    """
    rewards = list(rewards)
    if not rewards:
        raise ValueError("no rewards")
    n_points = math.ceil(len(rewards) / window)
    out = []
    for p in range(n_points):
        seen = sorted(rewards[: min((p + 1) * window, len(rewards))], reverse=True)
        out.append(float(np.mean(seen[:k])))
    return out


def compare_curves(nas: Sequence[float], rand: Sequence[float], k: int, window: int = 400) -> list[float]:
    """Per-window difference of top-k averages, over the shorter of the two runs."""
    n = min(len(nas), len(rand))
    if n == 0:
        raise ValueError("both logs must be non-empty")
    a = top_k_curve(list(nas)[:n], k, window)
    b = top_k_curve(list(rand)[:n], k, window)
    return [x - y for x, y in zip(a, b)]


def records_from(descs: Iterable[ArchDescription], rewards: Iterable[float]) -> list[SampleRecord]:
    """Minimal records for analysis helpers and tests."""
    return [SampleRecord(i, 0, 0, serialize_compact(d), r, r, 0.0, None, float(i), float(i))
            for i, (d, r) in enumerate(zip(descs, rewards))]
