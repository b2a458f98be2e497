from __future__ import annotations

import numpy as np
import pytest

from _policies import BANDIT, TOY_POLICIES, enumerate_trajectories, toy_params
from nasforge import controller, optim
from nasforge.reinforce import (BaselineState, policy_gradient, shape_reward_accuracy, shape_reward_perplexity,
                                update_baseline)


def test_accuracy_shaping():
    assert shape_reward_accuracy([0.1, 0.2, 0.8, 0.9, 0.85, 0.88, 0.87]) == pytest.approx(0.729, abs=1e-15)
    assert shape_reward_accuracy([0.0] * 10) == 0.0
    assert shape_reward_accuracy([0.3, 0.5, 0.1]) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        shape_reward_accuracy([])
    with pytest.raises(ValueError):
        shape_reward_accuracy([1.2])


def test_perplexity_shaping():
    assert shape_reward_perplexity(80, 80) == 0.0125
    assert shape_reward_perplexity(np.sqrt(80), 80) == pytest.approx(1.0, abs=1e-15)
    ppls = np.linspace(1.0, 500.0, 50)
    rewards = [shape_reward_perplexity(p) for p in ppls]
    assert all(a > b for a, b in zip(rewards, rewards[1:]))
    with pytest.raises(ValueError):
        shape_reward_perplexity(0.0)


def test_baseline_updates():
    b = update_baseline(BaselineState(decay=0.95), 0.5)
    assert b.value == 0.5
    assert update_baseline(b, 0.7).value == pytest.approx(0.51, abs=1e-15)
    s = BaselineState(decay=0.9)
    for _ in range(500):
        s = update_baseline(s, 0.3 if s.count else 5.0)
    assert s.value == pytest.approx(0.3, abs=1e-12)


def test_rewards_equal_to_baseline_give_zero_gradient():
    space, n = TOY_POLICIES["conv-1layer"]
    p = toy_params(space, 0)
    trajs = controller.sample(p, space, np.random.default_rng(0), n_layers=n, batch=5)
    g = policy_gradient(p, space, trajs, [0.4] * 5, 0.4)
    assert all(np.all(v == 0.0) for v in g.values())


def exact_expectations(space, n_layers, params, rewards, baseline):
    """(E[R], enumerated expectation of the estimator) for one toy policy."""
    trajs = enumerate_trajectories(space, n_layers)
    logp, _ = controller.log_prob(params, space, trajs)
    probs = np.exp(logp)
    assert abs(probs.sum() - 1.0) < 1e-12
    expect = {k: np.zeros_like(v) for k, v in params.items()}
    for pr, tr, r in zip(probs, trajs, rewards):
        g = policy_gradient(params, space, [tr], [r], baseline)
        for k in expect:
            expect[k] += pr * g[k]
    return float(probs @ rewards), expect


def exact_grad_expected_reward(space, n_layers, params, rewards):
    """grad E[R] = sum_a R(a) grad P(a), with grad P from the softmax graph directly."""
    trajs = enumerate_trajectories(space, n_layers)
    logp, _ = controller.log_prob(params, space, trajs)
    _, g = controller.log_prob(params, space, trajs, weights=np.exp(logp) * rewards)
    return g


@pytest.mark.parametrize("name", sorted(TOY_POLICIES))
def test_estimator_is_unbiased_on_enumerable_policies(name):
    space, n_layers = TOY_POLICIES[name]
    params = toy_params(space, 1)
    n_out = len(enumerate_trajectories(space, n_layers))
    assert n_out <= 64
    rewards = np.random.default_rng(2).uniform(0.0, 1.0, n_out)
    truth = exact_grad_expected_reward(space, n_layers, params, rewards)
    for b in (0.0, 0.7):
        _, expect = exact_expectations(space, n_layers, params, rewards, b)
        for k in truth:
            np.testing.assert_allclose(expect[k], truth[k], rtol=0, atol=1e-10)


def test_expected_reward_gradient_against_finite_differences():
    space, n_layers = TOY_POLICIES["conv-1layer"]
    params = toy_params(space, 3)
    rewards = np.random.default_rng(4).uniform(0.0, 1.0, 8)
    truth = exact_grad_expected_reward(space, n_layers, params, rewards)
    for key in ("head.filter_height.b", "head.num_filters.W"):
        flat = params[key].reshape(-1)
        for i in range(min(flat.size, 4)):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = exact_expectations(space, n_layers, params, rewards, 0.0)[0]
            flat[i] = orig - 1e-6
            down = exact_expectations(space, n_layers, params, rewards, 0.0)[0]
            flat[i] = orig
            assert abs((up - down) / 2e-6 - truth[key].reshape(-1)[i]) < 1e-8


def monte_carlo(space, n_layers, params, reward_of, baseline, n, seed, chunk=10_000):
    rng = np.random.default_rng(seed)
    total = {k: np.zeros_like(v) for k, v in params.items()}
    for _ in range(n // chunk):
        trajs = controller.sample(params, space, rng, n_layers=n_layers, batch=chunk)
        g = policy_gradient(params, space, trajs, [reward_of(t) for t in trajs], baseline)
        for k in total:
            total[k] += g[k] * chunk / n
    return total


def flat(g):
    return np.concatenate([g[k].reshape(-1) for k in sorted(g)])


def test_bandit_monte_carlo_matches_enumeration():
    space, n_layers = BANDIT
    params = toy_params(space, 5)
    rewards = np.array([1.0, 0.0])  # action 0 -> 1, action 1 -> 0
    truth = flat(exact_grad_expected_reward(space, n_layers, params, rewards))
    mc = flat(monte_carlo(space, n_layers, params, lambda t: rewards[t.actions[0]], 0.0, 100_000, 6))
    assert np.linalg.norm(mc - truth) / np.linalg.norm(truth) < 0.03


def test_bandit_ascent():
    space, n_layers = BANDIT
    params = controller.init_params(space, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    opt = optim.adam(0.01)
    b = BaselineState()
    for _ in range(500):
        trajs = controller.sample(params, space, rng, n_layers=n_layers, batch=8)
        rs = [1.0 if t.actions[0] == 0 else 0.0 for t in trajs]
        g = optim.clip_by_global_norm(policy_gradient(params, space, trajs, rs, b.value), 5.0)
        for r in rs:
            b = update_baseline(b, r)
        params, opt = optim.apply_update(opt, params, {k: -v for k, v in g.items()})
    p0 = np.exp(controller.next_step_log_probs(params, space, [], n_layers)[0])
    assert p0 > 0.95
