"""
Controller search against random search on a planted landscape
==============================================================

The landscape scores a cell by how many tokens match a hidden configuration,
plus Gaussian noise, so thousands of "children" cost nothing.
"""
from __future__ import annotations

import numpy as np

from nasforge import controller, train
from nasforge.arch import CellSearchSpace
from nasforge.distributed import random_search, serial_search
from nasforge.searchlog import best_architectures, top_k_curve
from nasforge.tasks import rigged_landscape

space = CellSearchSpace(base=2)
task = rigged_landscape(space, seed=0)
ev = train.ChildEvaluator(task)
print("planted tokens:", task.landscape.planted)

nas = serial_search(space, ev, 2000, batch=8, seed=0, learning_rate=0.003)
rand = random_search(space, ev, 2000, seed=0)

greedy = controller.sample(nas.params, space, greedy=True)[0].desc
print("greedy decode agreement:", task.landscape.agreement(greedy))

# Mean of the best five rewards seen so far, every 400 samples.
for name, rewards in (("controller", nas.log.rewards()), ("random", rand.rewards())):
    print(f"{name:>10}", np.round(top_k_curve(rewards, 5, 400), 4))

for rec in best_architectures(nas.log, 3):
    print(rec.sample, round(rec.reward, 4), rec.desc)
