"""Desk-scale tasks that child models are trained on.

Test splits are wrapped in :class:`HeldOut`; search code only ever touches
``train`` and ``valid``.  Opening a held-out split is an explicit, greppable
act reserved for the final one-off evaluation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .arch import ArchDescription, SearchSpace, token_vector

DATA_ENV = "NASFORGE_DATA"


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None  # per-target weights for sequence tasks

    def __len__(self) -> int:
        return len(self.x)


class HeldOut:
    """A test split that is only readable through :meth:`open`."""

    def __init__(self, split: Split):
        self._split = split

    def open(self) -> Split:
        return self._split

    def __len__(self) -> int:
        return len(self._split)


@dataclass(frozen=True)
class Task:
    name: str
    kind: str  # "image-classify" | "sequence-model" | "landscape"
    train: Split | None
    valid: Split | None
    test: HeldOut | None
    input_shape: tuple[int, ...]
    n_classes: int  # classes, or vocabulary size for sequence tasks
    metric: str  # "accuracy" | "perplexity" | "reward"
    augment: Callable | None = None  # (batch x, rng) -> batch x, training only
    landscape: "RiggedLandscape | None" = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind != "landscape" and (self.valid is None or len(self.valid) == 0):
            raise ValueError(f"task {self.name!r} needs a non-empty validation split")


# --------------------------------------------------------------------------
# synthetic shapes


def _draw_shape(label: int, rng: np.random.Generator, size: int = 8) -> np.ndarray:
    img = np.zeros((size, size))
    if label == 0:  # horizontal bar
        r, c0 = rng.integers(0, size), rng.integers(0, 3)
        img[r, c0 : c0 + rng.integers(5, size - c0 + 1)] = 1
    elif label == 1:  # vertical bar
        c, r0 = rng.integers(0, size), rng.integers(0, 3)
        img[r0 : r0 + rng.integers(5, size - r0 + 1), c] = 1
    elif label == 2:  # diagonal stroke
        k = rng.integers(4, size + 1)
        r0, c0 = rng.integers(0, size - k + 1), rng.integers(0, size - k + 1)
        idx = np.arange(k)
        if rng.random() < 0.5:
            img[r0 + idx, c0 + idx] = 1
        else:
            img[r0 + idx, c0 + k - 1 - idx] = 1
    else:  # hollow square
        k = rng.integers(3, 6)
        r0, c0 = rng.integers(0, size - k + 1), rng.integers(0, size - k + 1)
        img[r0 : r0 + k, c0] = img[r0 : r0 + k, c0 + k - 1] = 1
        img[r0, c0 : c0 + k] = img[r0 + k - 1, c0 : c0 + k] = 1
    return img


def synthetic_shapes(seed: int = 0, n_train: int = 4000, n_valid: int = 800, n_test: int = 800,
                     noise: float = 0.1) -> Task:
    """8x8 RGB images of four stroke patterns (bar, bar, diagonal, square)."""
    rng = np.random.default_rng(seed)
    n = n_train + n_valid + n_test
    y = rng.integers(0, 4, size=n)
    x = np.empty((n, 8, 8, 3))
    for i in range(n):
        color = rng.uniform(0.4, 1.0, size=3)
        x[i] = _draw_shape(int(y[i]), rng)[:, :, None] * color
    x += noise * rng.standard_normal(x.shape)
    a, b = n_train, n_train + n_valid
    return Task("synthetic-shapes", "image-classify", Split(x[:a], y[:a]), Split(x[a:b], y[a:b]),
                HeldOut(Split(x[b:], y[b:])), (8, 8, 3), 4, "accuracy")


# --------------------------------------------------------------------------
# copy memory

COPY_BLANK, COPY_GO = 0, 7


def copy_memory(seed: int = 0, n_train: int = 512, n_valid: int = 128, n_test: int = 128,
                length: int = 30, vocab: int = 8, n_copy: int = 5) -> Task:
    """Remember ``n_copy`` symbols across a run of blanks, then replay them.

    Layout: data, blanks, go marker, data again.  The model reads tokens
    ``0..L-2`` and predicts ``1..L-1``; only the replayed symbols are scored,
    so a perfect model has perplexity exactly 1 there.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_valid + n_test
    data = rng.integers(1, vocab - 1, size=(n, n_copy))
    seq = np.full((n, length), COPY_BLANK)
    seq[:, :n_copy] = data
    seq[:, length - n_copy - 1] = COPY_GO
    seq[:, length - n_copy:] = data
    mask = np.zeros(length - 1)
    mask[length - n_copy - 1:] = 1.0
    x, y = seq[:, :-1], seq[:, 1:]
    a, b = n_train, n_train + n_valid
    masks = np.broadcast_to(mask, y.shape)
    return Task("copy-memory", "sequence-model", Split(x[:a], y[:a], masks[:a]), Split(x[a:b], y[a:b], masks[a:b]),
                HeldOut(Split(x[b:], y[b:], masks[b:])), (length - 1,), vocab, "perplexity",
                info={"n_copy": n_copy})


# --------------------------------------------------------------------------
# character-level text


def char_toy_text() -> str:
    return resources.files("nasforge").joinpath("data/char_toy.txt").read_text(encoding="utf-8")


def char_toy(seq_len: int = 32, text: str | None = None) -> Task:
    """Character modelling of the bundled public-domain text (90/5/5, contiguous)."""
    text = char_toy_text() if text is None else text
    vocab = sorted(set(text))
    lookup = {ch: i for i, ch in enumerate(vocab)}
    ids = np.array([lookup[ch] for ch in text])
    a, b = int(0.9 * len(ids)), int(0.95 * len(ids))

    def chunks(arr):
        n = (len(arr) - 1) // seq_len
        x = arr[: n * seq_len].reshape(n, seq_len)
        y = arr[1 : n * seq_len + 1].reshape(n, seq_len)
        return Split(x, y, np.ones(y.shape))

    return Task("char-toy", "sequence-model", chunks(ids[:a]), chunks(ids[a:b]), HeldOut(chunks(ids[b:])),
                (seq_len,), len(vocab), "perplexity", info={"vocab": "".join(vocab)})


# --------------------------------------------------------------------------
# CIFAR-10 (optional, read from disk)


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Binary batch: per record one label byte then 3072 bytes of R, G, B planes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def cifar_augment(pad: int = 4):
    """Zero-pad, random 32x32 crop and random horizontal flip."""
    def augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        out = np.empty_like(x)
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        flips = rng.random(n) < 0.5
        for i in range(n):
            crop = xp[i, offs[i, 0] : offs[i, 0] + h, offs[i, 1] : offs[i, 1] + w]
            out[i] = crop[:, ::-1] if flips[i] else crop
        return out
    return augment


def cifar10(root=None, n_valid: int = 5000, seed: int = 0, pad: int = 4) -> Task | None:
    """Load CIFAR-10 from ``root`` (default ``$NASFORGE_DATA/cifar-10-batches-bin``).

    Returns None when the files are absent.
    """
    if root is None:
        base = os.environ.get(DATA_ENV)
        if not base:
            return None
        root = Path(base) / "cifar-10-batches-bin"
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        return None
    parts = [read_cifar_batch(f) for f in train_files]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    xt, yt = read_cifar_batch(test_file)
    mean = x.reshape(-1, 3).mean(axis=0)
    std = x.reshape(-1, 3).std(axis=0) + 1e-8
    x, xt = (x - mean) / std, (xt - mean) / std
    perm = np.random.default_rng(seed).permutation(len(x))
    n_valid = min(n_valid, len(x) // 10 or 1)
    vi, ti = perm[:n_valid], perm[n_valid:]
    return Task("cifar10", "image-classify", Split(x[ti], y[ti]), Split(x[vi], y[vi]),
                HeldOut(Split(xt, yt)), (32, 32, 3), 10, "accuracy", augment=cifar_augment(pad))


# --------------------------------------------------------------------------
# rigged landscape


@dataclass(frozen=True)
class RiggedLandscape:
    """Analytic reward with a planted optimum; no training involved.

    reward = floor + gap * (fraction of tokens equal to the planted ones) + noise,
    clipped to [0, 1].  The planted configuration scores ``floor + gap``.
    """

    space: SearchSpace
    planted: tuple[int, ...]
    n_layers: int | None = None
    gap: float = 0.3
    noise: float = 0.05
    floor: float = 0.5

    @classmethod
    def planted_at_random(cls, space: SearchSpace, seed: int, n_layers: int | None = None, **kw):
        from .arch import sample_uniform

        desc = sample_uniform(space, np.random.default_rng(seed), depth=n_layers)
        return cls(space, token_vector(desc, space), n_layers, **kw)

    def agreement(self, desc: ArchDescription) -> float:
        tokens = token_vector(desc, self.space)
        n = min(len(tokens), len(self.planted))
        hits = sum(int(a == b) for a, b in zip(tokens[:n], self.planted[:n]))
        return hits / max(len(self.planted), len(tokens))

    def mean_reward(self, desc: ArchDescription) -> float:
        return self.floor + self.gap * self.agreement(desc)

    def __call__(self, desc: ArchDescription, rng: np.random.Generator) -> float:
        r = self.mean_reward(desc) + self.noise * rng.standard_normal()
        return float(min(max(r, 0.0), 1.0))


def rigged_landscape(space: SearchSpace, seed: int = 0, n_layers: int | None = None, **kw) -> Task:
    land = RiggedLandscape.planted_at_random(space, seed, n_layers, **kw)
    return Task("rigged", "landscape", None, None, None, (), 0, "reward", landscape=land)


# --------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    kind: str
    description: str
    load: Callable[..., Task | None]

    def available(self) -> bool:
        if self.name != "cifar10":
            return True
        base = os.environ.get(DATA_ENV)
        return bool(base) and (Path(base) / "cifar-10-batches-bin" / "test_batch.bin").exists()


def builtin_tasks() -> dict[str, CatalogEntry]:
    return {
        "synthetic-shapes": CatalogEntry("synthetic-shapes", "image-classify",
                                         "8x8x3 images, 4 stroke classes, 4000/800/800", synthetic_shapes),
        "copy-memory": CatalogEntry("copy-memory", "sequence-model",
                                    "recall 5 symbols after a delay; vocab 8, length 30", copy_memory),
        "char-toy": CatalogEntry("char-toy", "sequence-model",
                                 "character LM on a bundled public-domain text, 90/5/5", lambda seed=0, **kw: char_toy(**kw)),
        "cifar10": CatalogEntry("cifar10", "image-classify",
                                f"CIFAR-10 binary batches under ${DATA_ENV}/cifar-10-batches-bin",
                                lambda seed=0, **kw: cifar10(seed=seed, **kw)),
        "rigged": CatalogEntry("rigged", "landscape",
                               "analytic reward with a planted optimum (no training)", rigged_landscape),
    }
