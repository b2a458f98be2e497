from __future__ import annotations

import numpy as np
import pytest

from _graphs import fd_gradient
from nasforge import controller
from nasforge.arch import CellSearchSpace, ConvSearchSpace
from nasforge.controller import IncompatibleParamsError

CONV = ConvSearchSpace()
CELL2 = CellSearchSpace(base=2)


def params_for(space, seed=0):
    return controller.init_params(space, np.random.default_rng(seed))


def test_init_range_and_head_widths():
    p = params_for(CONV)
    assert all(np.all(np.abs(v) <= 0.08) for v in p.values())
    for name, vals in CONV.token_lists():
        assert p[f"head.{name}.W"].shape == (35, len(vals))
    assert p["lstm1.Wh"].shape == (35, 140)


def test_action_counts():
    assert controller.n_actions(CONV, 1) == 3
    assert controller.n_actions(CellSearchSpace(base=2)) == 10
    assert controller.n_actions(CellSearchSpace(base=8)) == 34
    traj = controller.sample(params_for(CONV), CONV, np.random.default_rng(0), n_layers=1)[0]
    assert len(traj) == 3 and traj.desc.layers[0].skip_inputs == ()


def test_skip_bits_counted_per_layer():
    traj = controller.sample(params_for(CONV), CONV, np.random.default_rng(0), n_layers=3)[0]
    bits = [a for a in traj.actions if isinstance(a, tuple)]
    assert [len(b) for b in bits] == [1, 2]


def test_fresh_controller_is_near_uniform():
    trajs = controller.sample(params_for(CONV), CONV, np.random.default_rng(1), n_layers=1, batch=20_000)
    first = np.array([t.actions[0] for t in trajs])
    freq = np.bincount(first, minlength=4) / len(first)
    assert np.all((freq >= 0.22) & (freq <= 0.28))


def test_uniform_token_log_prob():
    zeros = {k: np.zeros_like(v) for k, v in params_for(CONV).items()}
    traj = controller.sample(zeros, CONV, np.random.default_rng(0), n_layers=1)[0]
    assert traj.log_probs[0] == pytest.approx(np.log(0.25), abs=1e-15)


def test_greedy_is_deterministic():
    p = params_for(CONV, 3)
    a = controller.sample(p, CONV, greedy=True, n_layers=4)[0]
    b = controller.sample(p, CONV, greedy=True, n_layers=4)[0]
    assert a.actions == b.actions and a.desc == b.desc


def test_step_probabilities_sum_to_one():
    p = params_for(CELL2, 4)
    traj = controller.sample(p, CELL2, np.random.default_rng(0))[0]
    for t in range(len(traj.actions)):
        lp = controller.next_step_log_probs(p, CELL2, traj.actions[:t])
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12


def test_sampled_action_feeds_next_step():
    p = params_for(CELL2, 5)
    a = controller.next_step_log_probs(p, CELL2, [0])
    b = controller.next_step_log_probs(p, CELL2, [1])
    assert np.max(np.abs(a - b)) > 1e-8


@pytest.mark.parametrize("space,n_layers", [(CONV, 4), (CELL2, None), (ConvSearchSpace(strides=(1, 2)), 3)])
def test_log_prob_recompute(space, n_layers):
    p = params_for(space, 6)
    trajs = controller.sample(p, space, np.random.default_rng(7), n_layers=n_layers, batch=100)
    lp, _ = controller.log_prob(p, space, trajs)
    assert np.max(np.abs(lp - np.array([t.log_prob for t in trajs]))) < 1e-10


def test_log_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    p = {k: rng.uniform(-0.5, 0.5, v.shape) for k, v in params_for(CONV).items()}
    trajs = controller.sample(p, CONV, rng, n_layers=3, batch=3)
    w = rng.standard_normal(3)
    _, grads = controller.log_prob(p, CONV, trajs, w)
    worst = 0.0
    for key in ("head.filter_height.W", "lstm0.Wx", "attn.v", "attn.W_prev", "emb.start"):
        arr = p[key]
        idx = rng.choice(arr.size, size=min(arr.size, 6), replace=False)
        flat = arr.reshape(-1)
        for i in idx:
            orig = flat[i]
            vals = []
            for d in (1e-5, -1e-5):
                flat[i] = orig + d
                vals.append(float(np.dot(w, controller.log_prob(p, CONV, trajs)[0])))
            flat[i] = orig
            num = (vals[0] - vals[1]) / 2e-5
            worst = max(worst, abs(num - grads[key].reshape(-1)[i]) / max(abs(num), abs(grads[key].reshape(-1)[i]), 1e-6))
    assert worst < 1e-4


def test_skip_logit():
    rng = np.random.default_rng(9)
    p = {"attn.W_prev": rng.standard_normal((4, 4)), "attn.W_curr": rng.standard_normal((4, 4)),
         "attn.v": np.zeros((4, 1))}
    hj, hi = rng.standard_normal(4), rng.standard_normal(4)
    assert controller.skip_logit(p, hj, hi) == 0.5
    p["attn.v"] = rng.standard_normal((4, 1))
    z = 0.0
    for k in range(4):
        s = sum(hj[a] * p["attn.W_prev"][a, k] + hi[a] * p["attn.W_curr"][a, k] for a in range(4))
        z += p["attn.v"][k, 0] * np.tanh(s)
    assert abs(controller.skip_logit(p, hj, hi) - 1.0 / (1.0 + np.exp(-z))) < 1e-12


def test_skip_logit_gradient():
    from nasforge.autodiff import backward

    rng = np.random.default_rng(10)
    p = {"attn.W_prev": rng.standard_normal((4, 4)), "attn.W_curr": rng.standard_normal((4, 4)),
         "attn.v": rng.standard_normal((4, 1))}
    hj, hi = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
    g = controller.skip_logit_graph(4)
    grads = backward(g, p, {"h_j": hj, "h_i": hi}, upstream={"p": np.ones((1, 1))}, wrt_inputs=True)
    for key, arr in list(p.items()) + [("h_j", hj), ("h_i", hi)]:
        num = fd_gradient(lambda: controller.skip_logit(p, hj, hi), arr)
        assert np.max(np.abs(num - grads[key])) < 1e-6


def test_incompatible_params_rejected():
    p = params_for(CONV)
    wide = ConvSearchSpace(num_filters=(24, 36, 48, 64, 96))
    with pytest.raises(IncompatibleParamsError):
        controller.sample(p, wide, np.random.default_rng(0), n_layers=2)
    trajs = controller.sample(p, CONV, np.random.default_rng(0), n_layers=2)
    with pytest.raises(IncompatibleParamsError):
        controller.log_prob(p, wide, trajs)


def test_sampling_needs_rng():
    with pytest.raises(ValueError):
        controller.sample(params_for(CELL2), CELL2)
