import math

import numpy as np
import pytest

from prunecert import numcore as nc
from prunecert.attack import AttackSpec, random_attack
from prunecert.envs import GridWorld, PointMass
from prunecert.numcheck import finite_diff_grad, linear_gaussian_max_kl
from prunecert.policy import GaussianHead, Layer, PolicyNetwork, make_policy
from prunecert.prune import PruneState
from prunecert.rl import (Adam, Learner, NonFiniteLossError, PpoConfig, clip_grad_norm, collect_rollout, gae,
                          pgd_max_kl, ppo_loss, ppo_update, sa_regularizer, train)

SMALL = dict(total_steps=1024, num_envs=4, rollout_len=64, minibatches=4, update_epochs=2, hidden=(16,))


def test_config_defaults():
    c = PpoConfig()
    assert (c.learning_rate, c.update_epochs, c.minibatches, c.gamma, c.gae_lambda) == (3e-4, 4, 32, 0.99, 0.95)
    assert (c.clip_epsilon, c.entropy_coef, c.value_coef, c.max_grad_norm) == (0.2, 0.01, 0.5, 1.0)
    with pytest.raises(ValueError):
        PpoConfig(kappa=-1)
    with pytest.raises(ValueError):
        PpoConfig(minibatches=0)


def test_gae_examples():
    r, v, d = np.ones(3), np.zeros(3), np.zeros(3, bool)
    adv, ret = gae(r, v, d, 0.5, 0.5)
    # recursion A_t = delta_t + 0.25 A_{t+1} with every delta equal to 1
    assert np.allclose(adv, [1.3125, 1.25, 1.0])
    assert np.allclose(ret, adv)
    vals = np.array([0.2, -0.4, 0.7])
    adv0, _ = gae(r, vals, d, 0.0, 0.9)
    assert np.allclose(adv0, r - vals)
    adv_l0, _ = gae(r, vals, d, 0.9, 0.0, bootstrap=0.3)
    assert np.allclose(adv_l0, r + 0.9 * np.array([-0.4, 0.7, 0.3]) - vals)
    with pytest.raises(ValueError):
        gae(np.ones(3), np.ones(2), np.zeros(3, bool), 0.9, 0.9)


def test_gae_cut_at_done():
    adv, _ = gae(np.ones(3), np.zeros(3), np.array([False, True, False]), 0.5, 1.0, bootstrap=10.0)
    assert np.allclose(adv, [1.5, 1.0, 6.0])


def test_rollout_clean_and_zero_budget():
    env, cfg = PointMass(), PpoConfig(**SMALL)
    net = make_policy(4, action_dim=2, hidden=(16,))
    clean = collect_rollout(net, env, cfg, rng=np.random.default_rng(0))
    assert np.array_equal(clean.obs, clean.states)
    zero = AttackSpec("random", epsilon=0.0)
    attacked = collect_rollout(net, env, cfg, lambda o, r: random_attack(o, zero, r), np.random.default_rng(0))
    assert np.array_equal(attacked.obs, clean.obs) and np.array_equal(attacked.rewards, clean.rewards)


def test_rollout_attacked_states_within_budget():
    env, cfg = PointMass(), PpoConfig(**SMALL)
    net = make_policy(4, action_dim=2, hidden=(16,))
    spec = AttackSpec("random", epsilon=0.075)
    b = collect_rollout(net, env, cfg, lambda o, r: random_attack(o, spec, r), np.random.default_rng(0))
    assert np.max(np.abs(b.obs - b.states)) <= 0.075
    # the environment consumed the true states: re-stepping them reproduces the rewards
    r = env.step(b.flat("states"), b.flat("actions")).r
    assert np.array_equal(r, b.flat("rewards"))


def _linear_gaussian(rng, out=2, d=4, sigma=0.3):
    W = rng.normal(size=(out, d))
    return W, PolicyNetwork([Layer(W, rng.normal(size=out))], [Layer(np.zeros((1, d)), np.zeros(1))],
                            GaussianHead(np.full(out, sigma)))


def test_sa_regularizer_zero_cases(rng):
    _, net = _linear_gaussian(rng)
    S = rng.normal(size=(8, 4))
    assert float(nc.value_of(sa_regularizer(net, S, 0.0, rng=rng))) == 0.0
    const = net.with_parameters([np.zeros_like(p) for p in net.parameters()])
    assert float(nc.value_of(sa_regularizer(const, S, 0.5, rng=rng))) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_pgd_max_kl_near_corner_optimum(seed):
    rng = np.random.default_rng(seed)
    W, net = _linear_gaussian(rng, 2, 4, 0.3)
    s = rng.normal(size=(1, 4))
    _, val = pgd_max_kl(net, s, 0.1, 5, 0.05, rng)
    oracle = linear_gaussian_max_kl(W, 0.3, 0.1).value
    assert float(val[0]) <= oracle * (1 + 1e-9)
    assert float(val[0]) >= 0.9 * oracle


def test_sa_regularizer_gradient_flows_to_weights(rng):
    _, net = _linear_gaussian(rng)
    S = rng.normal(size=(3, 4))
    tape = nc.Tape()
    leaves = [tape.leaf(p) for p in net.parameters()]
    reg = sa_regularizer(net.with_parameters(leaves), S, 0.1, rng=np.random.default_rng(0))
    g = nc.grad(tape, reg, leaves)
    assert np.linalg.norm(g[0]) > 0


def _batch(rng, cfg, env=None):
    env = env or PointMass()
    net = make_policy(env.obs_dim, action_dim=env.action_dim, hidden=(16,))
    return net, collect_rollout(net, env, cfg, rng=rng)


def test_ppo_loss_ratio_one_and_kappa_zero(rng):
    cfg = PpoConfig(**SMALL, entropy_coef=0.0, value_coef=0.0)
    net, b = _batch(rng, cfg)
    adv = b.flat("advantages")
    loss, terms = ppo_loss(net, b.flat("obs"), b.flat("actions"), b.flat("log_probs"), adv, b.flat("returns"), cfg, rng)
    norm = (adv - adv.mean()) / max(adv.std(), 1e-8)
    assert terms["loss_pi"] == pytest.approx(-norm.mean(), abs=1e-12)
    assert terms["r_sa"] == 0.0
    assert float(nc.value_of(loss)) == pytest.approx(terms["loss_pi"], abs=1e-12)


def test_ppo_loss_gradient_matches_finite_differences(rng):
    cfg = PpoConfig(**{**SMALL, "kappa": 0.0})
    net, b = _batch(rng, cfg)
    idx = np.arange(32)
    args = (b.flat("obs")[idx], b.flat("actions")[idx], b.flat("log_probs")[idx] - 0.05,
            b.flat("advantages")[idx], b.flat("returns")[idx], cfg)
    params = net.parameters()
    tape = nc.Tape()
    leaves = [tape.leaf(p) for p in params]
    loss, _ = ppo_loss(net.with_parameters(leaves), *args, np.random.default_rng(0))
    g = nc.grad(tape, loss, leaves)
    for k in (0, 1, len(params) - 2):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return float(nc.value_of(ppo_loss(net.with_parameters(ps), *args, np.random.default_rng(0))[0]))
        fd = finite_diff_grad(f, params[k])
        assert np.allclose(g[k], fd, rtol=1e-4, atol=1e-7)


def test_clip_grad_norm():
    g = [np.full(4, 3.0), np.full(2, 4.0)]
    clipped, pre = clip_grad_norm(g, 1.0)
    assert pre == pytest.approx(math.sqrt(36 + 32))
    assert math.sqrt(sum(float(np.sum(x * x)) for x in clipped)) <= 1.0 + 1e-9
    same, _ = clip_grad_norm(g, 100.0)
    assert all(np.array_equal(a, b) for a, b in zip(same, g))


def test_adam_first_step_is_lr_sized():
    opt = Adam([np.zeros(3)], 0.1)
    out = opt.step([np.zeros(3)], [np.array([1.0, -2.0, 0.5])])
    assert np.allclose(out[0], [-0.1, 0.1, -0.1])


def test_non_finite_loss_aborts(rng):
    cfg = PpoConfig(**SMALL)
    net, b = _batch(rng, cfg)
    b.advantages = b.advantages.copy()
    b.advantages[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        ppo_update(Learner(net, cfg, PruneState()), b, rng)


def test_train_zero_steps_returns_initial_net():
    cfg = PpoConfig(**{**SMALL, "total_steps": 0})
    res = train(cfg, PointMass())
    init = make_policy(4, action_dim=2, hidden=(16,), seed=0)
    assert res.metrics == []
    assert all(np.array_equal(a, b) for a, b in zip(res.net.parameters(), init.parameters()))


def test_train_deterministic_with_sa():
    cfg = PpoConfig(**{**SMALL, "kappa": 0.5, "sa_inner_steps": 2})
    a, b = train(cfg, PointMass(horizon=40)), train(cfg, PointMass(horizon=40))
    assert a.metrics == b.metrics
    assert all(np.array_equal(x, y) for x, y in zip(a.net.parameters(), b.net.parameters()))
    assert all(m["r_sa"] >= 0 for m in a.metrics)


def test_train_linear_schedule_reaches_target():
    cfg = PpoConfig(**SMALL)
    ps = PruneState("magnitude", 0.5, "linear", burn_in_fraction=0.0, update_interval=cfg.minibatches)
    res = train(cfg, PointMass(horizon=40), ps)
    total = sum(m.size for m in res.masks.values())
    assert abs(res.metrics[-1]["sparsity"] - 0.5) * total <= 1.0
    for e in res.prune_events:
        assert e["lipschitz_after"] <= e["lipschitz_before"]
        assert abs(e["realized_sparsity"] - e["scheduled_sparsity"]) * e["total"] <= 1.0 + 1e-9


def test_train_categorical_gridworld_runs():
    cfg = PpoConfig(**{**SMALL, "kappa": 0.1, "epsilon": 0.5, "sa_inner_steps": 1})
    res = train(cfg, GridWorld())
    assert len(res.metrics) == cfg.num_updates
    assert all(np.isfinite(m["loss_pi"]) for m in res.metrics)


def test_callback_receives_rows():
    seen = []
    cfg = PpoConfig(**SMALL)
    train(cfg, PointMass(horizon=40), callback=lambda row, net: seen.append((row["step"], net.input_dim)))
    assert [s for s, _ in seen] == [cfg.batch_size * (i + 1) for i in range(cfg.num_updates)]
