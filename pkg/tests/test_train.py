from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from nasforge import train
from nasforge.arch import CellDescription, ConvArch, ConvLayerSpec
from nasforge.tasks import HeldOut, Split, Task, copy_memory

DEGENERATE_CELL = CellDescription((("elem_mult", "identity"),) * 3, ("elem_mult", "identity"), (0, 0))
ONE_LAYER = ConvArch((ConvLayerSpec(3, 3, 1, 1, 24),))


def separable_task(seed=0, n=400):
    """Class 1 images are brighter in the red channel; trivially separable."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    x = 0.1 * rng.standard_normal((n, 8, 8, 3))
    x[..., 0] += np.where(y == 1, 1.0, -1.0)[:, None, None]
    a, b = int(0.6 * n), int(0.8 * n)
    return Task("separable", "image-classify", Split(x[:a], y[:a]), Split(x[a:b], y[a:b]),
                HeldOut(Split(x[b:], y[b:])), (8, 8, 3), 2, "accuracy")


def constant_task(seed=0, n=128):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 8, 8, 3))
    y = np.zeros(n, dtype=int)
    return Task("constant", "image-classify", Split(x, y), Split(x[:32], y[:32]), HeldOut(Split(x[:32], y[:32])),
                (8, 8, 3), 4, "accuracy")


class PoisonedTest(HeldOut):
    def open(self):
        raise AssertionError("test split opened during search")


@pytest.mark.parametrize("layer", [ConvLayerSpec(3, 3, 1, 1, 24), ConvLayerSpec(1, 7, 1, 1, 36),
                                   ConvLayerSpec(5, 1, 1, 1, 64)])
def test_separable_task_is_learned(layer):
    task = separable_task()
    config = train.default_config(task, epochs=10)
    result = train.train_child(train.compile_for_task(ConvArch((layer,)), task, config), task, config)
    assert result.history[-1] >= 0.95
    assert len(result.history) == 10 and not result.diverged


def test_constant_labels():
    task = constant_task()
    config = train.default_config(task, epochs=3)
    result = train.train_child(train.compile_for_task(ONE_LAYER, task, config), task, config)
    assert result.history[-1] == 1.0
    untrained = []
    for seed in range(40):
        cfg = dataclasses.replace(config, seed=seed)
        runner = train._runner(train.compile_for_task(ONE_LAYER, task, cfg), task, cfg, np.random.default_rng(seed))
        untrained.append(runner.evaluate(task.valid))
    assert 0.1 <= np.mean(untrained) <= 0.4


def test_lstm_beats_degenerate_cell_on_copy_memory():
    for seed in range(5):
        task = copy_memory(seed=seed)
        config = train.default_config(task, seed=seed)
        lstm = train.train_child(train.compile_for_task("lstm", task, config), task, config)
        deg = train.train_child(train.compile_for_task(DEGENERATE_CELL, task, config), task, config)
        assert lstm.best_recent() < deg.best_recent()


def test_divergence_reports_worst_metric():
    task = copy_memory(seed=0, n_train=64, n_valid=32, n_test=32)
    config = train.default_config(task, epochs=3, learning_rate=1e100, grad_clip=None)
    result = train.train_child(train.compile_for_task("lstm", task, config), task, config)
    assert result.diverged
    assert result.history == [train.PPL_CAP] * 3
    assert train.reward_from(result)[1] == pytest.approx(80 / train.PPL_CAP**2)


def test_evaluator_never_opens_test_split():
    base = separable_task()
    task = dataclasses.replace(base, test=PoisonedTest(base.test.open()))
    ev = train.ChildEvaluator(task, train.default_config(task, epochs=2))
    raw, reward = ev(ONE_LAYER, 0)
    assert 0.0 <= raw <= 1.0 and reward == pytest.approx(raw**3)


def test_evaluator_memo():
    task = separable_task()
    ev = train.ChildEvaluator(task, train.default_config(task, epochs=1), memo=True)
    assert ev(ONE_LAYER, 0) == ev(ONE_LAYER, 1)
    assert ev.trained == 1


def test_sequence_reward_is_shaped_perplexity():
    task = copy_memory(seed=0, n_train=64, n_valid=32, n_test=32)
    ev = train.ChildEvaluator(task, train.default_config(task, epochs=1), c=80)
    raw, reward = ev(DEGENERATE_CELL, 0)
    assert reward == pytest.approx(80 / raw**2)


def test_grid_of_one_is_train_plus_test():
    task = separable_task()
    base = train.default_config(task, epochs=2)
    config, result, cells = train.grid_search(ONE_LAYER, task, {"learning_rate": [0.05]}, base)
    assert len(cells) == 1 and config.learning_rate == 0.05
    plain = train.train_child(train.compile_for_task(ONE_LAYER, task, config), task, config)
    assert result.history == plain.history
    assert result.test_metric is not None and plain.test_metric is None


def test_grid_selection_law_and_zero_lr():
    task = separable_task()
    base = train.default_config(task, epochs=3)
    grid = {"learning_rate": [0.0, 0.05, 0.1], "weight_decay": [0.0, 1e-4]}
    config, result, cells = train.grid_search(ONE_LAYER, task, grid, base)
    assert len(cells) == 6
    assert config.learning_rate > 0
    assert all(result.best_recent() >= r.best_recent() for _, r in cells)
    with pytest.raises(ValueError):
        train.grid_search(ONE_LAYER, task, {"momentum": [0.9]}, base)


def test_grid_only_opens_test_once():
    base = separable_task()
    opened = []

    class Counting(HeldOut):
        def open(self):
            opened.append(1)
            return super().open()

    task = dataclasses.replace(base, test=Counting(base.test.open()))
    train.grid_search(ONE_LAYER, task, {"learning_rate": [0.01, 0.1]}, train.default_config(task, epochs=1))
    assert len(opened) == 1


def test_signature_mismatch_rejected():
    task = separable_task()
    config = train.default_config(task)
    from nasforge import compiler

    wrong = compiler.compile_conv(ONE_LAYER, (8, 8, 3), 5)
    with pytest.raises(ValueError, match="signature"):
        train.train_child(wrong, task, config)
    with pytest.raises(ValueError):
        train.compile_for_task(DEGENERATE_CELL, task, config)


def test_hidden_size_from_budget():
    task = copy_memory(seed=0, n_train=8, n_valid=8, n_test=8)
    config = train.default_config(task)
    h_cell = train.sequence_hidden_size("cell", 2, 8, config)
    h_lstm = train.sequence_hidden_size("lstm", 0, 8, config)
    assert h_cell > h_lstm >= 1
