"""
Training cells on the copy-memory task
======================================

Each child is a one-layer recurrent language model whose hidden size is picked
to hit a parameter budget; the metric is validation perplexity on the recalled
symbols (1.0 is perfect recall).
"""
from __future__ import annotations

import numpy as np

from nasforge import train
from nasforge.arch import TANH_RNN_CELL, CellSearchSpace
from nasforge.distributed import serial_search
from nasforge.searchlog import best_architectures
from nasforge.tasks import copy_memory

task = copy_memory(seed=0)
config = train.default_config(task, seed=0)


def perplexity(desc) -> float:
    return train.train_child(train.compile_for_task(desc, task, config), task, config).best_recent()


print("tanh RNN :", round(perplexity(TANH_RNN_CELL), 3))
print("LSTM     :", round(perplexity("lstm"), 3))

# A short search; memo skips retraining cells the controller proposes twice.
ev = train.ChildEvaluator(task, config, memo=True)
result = serial_search(CellSearchSpace(base=2), ev, 48, batch=8, seed=0, learning_rate=0.003)
best = best_architectures(result.log, 1)[0]
print(f"best of {ev.trained} cells: ppl {best.raw:.3f}")
print(best.description())
print("rewards c/ppl^2 per batch:", np.round(result.log.rewards().reshape(-1, 8).mean(axis=1), 4))
