"""Small controller policies whose outcomes can be enumerated exactly."""
from __future__ import annotations

import itertools

import numpy as np

from nasforge import controller
from nasforge.arch import CellSearchSpace, ConvSearchSpace

BANDIT = (ConvSearchSpace(filter_heights=(1, 3), filter_widths=(1,), num_filters=(24,)), 1)

TOY_POLICIES = {
    "bandit": BANDIT,
    "conv-1layer": (ConvSearchSpace(filter_heights=(1, 3), filter_widths=(1, 3), num_filters=(24, 36)), 1),
    "conv-2layer-skips": (ConvSearchSpace(filter_heights=(1, 3), filter_widths=(1,), num_filters=(24, 36)), 2),
    "conv-strides": (ConvSearchSpace(filter_heights=(1, 3), filter_widths=(1,), num_filters=(24, 36),
                                     strides=(1, 2)), 1),
    "cell-indices": (CellSearchSpace(combiners=("add",), activations=("tanh",), base=2), None),
}


def enumerate_trajectories(space, n_layers):
    """Every action sequence the policy can emit, as forced trajectories."""
    classes = controller.token_classes(space)
    choices = []
    for kind, arg in controller.plan(space, n_layers):
        if kind == "token":
            choices.append(range(classes[arg]))
        elif arg > 0:
            choices.append(list(itertools.product((0, 1), repeat=arg)))
    out = []
    for actions in itertools.product(*choices):
        out.append(controller.Trajectory(tuple(actions), (), controller.decode(space, actions, n_layers), n_layers))
    return out


def toy_params(space, seed):
    """Controller params scaled up so the policy is far from uniform."""
    rng = np.random.default_rng(seed)
    return {k: rng.uniform(-0.6, 0.6, v.shape) for k, v in controller.init_params(space, rng).items()}
