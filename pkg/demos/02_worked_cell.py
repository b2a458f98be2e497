"""
Compiling the worked base-2 cell and taking gradients
======================================================
"""
from __future__ import annotations

import numpy as np

from nasforge import compiler, gradcheck
from nasforge.arch import WORKED_CELL
from nasforge.autodiff import backward, forward

# The description: tanh(add) and relu(elem_mult) leaves, memory injected with
# add + relu, root sigmoid(elem_mult).
print(WORKED_CELL)
cg = compiler.compile_cell(WORKED_CELL, input_dim=3, hidden_dim=4, batch=2)
print(compiler.dump(cg))

rng = np.random.default_rng(0)
params = compiler.init_params(cg.manifest, rng)
inputs = {k: rng.standard_normal(s) for k, s in cg.graph.input_shapes().items()}
out = forward(cg.graph, params, inputs)
print("h_t =", np.round(out["h"], 4))
print("c_t =", np.round(out["c"], 4))

# Reverse mode against central differences.
grads = backward(cg.graph, params, inputs, upstream={k: np.ones_like(v) for k, v in out.items()})
print({k: v.shape for k, v in grads.items()})
err = gradcheck.check_graph(cg.graph, params, inputs, rng, include_inputs=True)
print(f"max relative gradient error {err:.2e}")
