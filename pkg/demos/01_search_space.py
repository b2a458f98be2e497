"""
Counting and sampling recurrent-cell descriptions
==================================================
"""
from __future__ import annotations

import numpy as np

from nasforge import arch

# A cell is a binary tree of blocks.  Each block picks a combiner and an
# activation, and two extra tokens say where the memory state enters and leaves.
for base in (2, 4, 8):
    space = arch.CellSearchSpace(base=base)
    n = arch.count_search_space(space)
    print(f"base {base}: {n} cells (~{arch.approx(n)})")

# At base 2 the space is small enough to walk exhaustively.
space = arch.CellSearchSpace(base=2)
print("enumerated:", sum(1 for _ in arch.enumerate_space(space)))

# Widening the op lists grows the space multiplicatively.
wide = arch.extend_space(arch.CellSearchSpace(base=8), ["max"], ["sin"])
print("base 8 with max/sin:", arch.approx(arch.count_search_space(wide)))

# Descriptions serialize to a small JSON profile and parse back unchanged.
desc = arch.sample_uniform(space, np.random.default_rng(0))
text = arch.serialize(desc)
print(text)
assert arch.parse(text) == desc
