"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Thresholds and oracles are computed independently of the code under test
where possible (closed forms, quadrature, corner enumeration, scripted and
random controllers).
"""
import math
import time

import numpy as np
import pytest
import yaml
from scipy.special import softmax

from prunecert import numcore as nc
from prunecert.attack import AttackSpec, evaluate, learned_adversary_step, make_adversary, train_adversary
from prunecert.cert import actor_jacobian, surrogate_lipschitz
from prunecert.cli import main
from prunecert.envs import GridWorld, PointMass, tile_one_hot_valid
from prunecert.harness import aggregate, normalize, sweet_spot
from prunecert.numcheck import finite_diff_grad, gaussian_tv_1d, linear_gaussian_max_kl, mc_tv
from prunecert.policy import (C_QUARTER_CATEGORICAL, C_VERIFIED_CATEGORICAL, Categorical, Gaussian, GaussianHead, Layer,
                              PolicyNetwork, kl, make_policy, tv_upper_bound)
from prunecert.prune import PruneState, erk_layer_sparsities, scheduled_sparsity
from prunecert.rl import PpoConfig, collect_rollout, pgd_max_kl, ppo_loss, train

from conftest import ACTS, random_layers, random_net

SEEDS = (0, 1, 2, 3)
EPS = 0.075


# ---------------------------------------------------------------------------
# shared trained point-mass policies (criteria 8, 9, 11)
# ---------------------------------------------------------------------------

def _rollout_return(env, act, episodes, seed):
    """Plain env loop; ``act(obs, rng)`` gives the action batch."""
    rng = np.random.default_rng(seed)
    S = env.reset(rng, episodes)
    ret = np.zeros(episodes)
    for _ in range(env.horizon):
        tr = env.step(S, act(env.observe(S), rng))
        S, ret = tr.s_next, ret + tr.r
    return ret


@pytest.fixture(scope="module")
def pointmass_thresholds():
    env = PointMass()
    rand = _rollout_return(env, lambda o, r: r.uniform(env.action_low, env.action_high, (len(o), env.action_dim)),
                           200, 7)
    scripted = _rollout_return(env, lambda o, r: env.scripted_action(o), 200, 7)
    return float(rand.mean()), float(scripted.mean())


@pytest.fixture(scope="module")
def trained_victims(pointmass_thresholds):
    env = PointMass()
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        res = train(PpoConfig(total_steps=200_000, seed=seed), env)
        out[seed] = (res.net, time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------
# 1-7: bound properties and numerics
# ---------------------------------------------------------------------------

def test_c01_monotone_under_masking(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    violations = 0
    for _ in range(10_000):
        depth = int(rng.integers(1, 5))
        sizes = list(rng.integers(1, 9, size=depth + 1))
        layers = random_layers(rng, sizes, str(rng.choice(ACTS)))
        masked = [Layer(l.weights * (rng.random(l.shape) < rng.random()), l.bias, l.activation) for l in layers]
        violations += surrogate_lipschitz(masked) > surrogate_lipschitz(layers)
    dt = time.perf_counter() - t0
    criterion(1, violations == 0 and dt < 30, f"{violations} violations in 10^4 pairs, {dt:.1f}s (limit 30s)")


def test_c02_gaussian_bound_soundness(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    violations, slack = 0, math.inf
    for _ in range(1000):
        depth = int(rng.integers(1, 4))
        sizes = list(rng.integers(1, 7, size=depth + 1))
        sigma = rng.uniform(0.05, 1.0, size=sizes[-1])
        net = PolicyNetwork(random_layers(rng, sizes, str(rng.choice(ACTS))),
                            [Layer(np.zeros((1, sizes[0])), np.zeros(1))], GaussianHead(sigma))
        c = 1.0 / math.sqrt(2.0 * math.pi * float(np.min(sigma)) ** 2)
        L = surrogate_lipschitz(net)
        eps = float(rng.uniform(0.01, 0.5))
        S = rng.normal(size=(10, sizes[0]))
        D = rng.normal(size=(10, 10, sizes[0]))
        D *= (eps * rng.random((10, 10, 1)) ** (1 / sizes[0])) / np.linalg.norm(D, axis=-1, keepdims=True)
        mu0 = net.actor_output(S)
        mu1 = net.actor_output((S[:, None, :] + D).reshape(-1, sizes[0])).reshape(10, 10, -1)
        gap = np.linalg.norm((mu1 - mu0[:, None, :]) / sigma, axis=-1)
        tv = gaussian_tv_1d(gap)  # oracle: 1-d quadrature along the whitened mean gap
        bound = c * L * np.linalg.norm(D, axis=-1)
        violations += int(np.sum(tv > bound + 1e-12))
        slack = min(slack, float(np.min(bound - tv)))
    dt = time.perf_counter() - t0
    criterion(2, violations == 0 and dt < 60,
              f"{violations} violations over 10^5 checks, min slack {slack:.3g}, {dt:.1f}s (limit 60s)")


def test_c03_categorical_constant_audit(criterion):
    tv_bin = mc_tv({"probs": softmax([1.0, 0.0])}, {"probs": softmax([0.0, 1.0])}).value
    quarter_bound = C_QUARTER_CATEGORICAL * math.sqrt(2.0)
    counterexample = round(tv_bin, 5) == 0.46212 and tv_bin > quarter_bound
    rng = np.random.default_rng(3)
    violations = 0
    for k in range(2, 7):
        n = 20_000
        zp, zq = rng.normal(scale=3.0, size=(n, k)), rng.normal(scale=3.0, size=(n, k))
        tv = 0.5 * np.abs(softmax(zp, axis=1) - softmax(zq, axis=1)).sum(axis=1)
        bound = tv_upper_bound(Categorical(zp), Categorical(zq), C_VERIFIED_CATEGORICAL)
        violations += int(np.sum(tv > bound + 1e-12))
    criterion(3, counterexample and violations == 0,
              f"binary TV {tv_bin:.5f} > 0.25*sqrt(2) = {quarter_bound:.5f}; "
              f"verified constant: {violations} violations over 10^5 pairs")


def test_c04_local_below_global(criterion):
    rng = np.random.default_rng(4)
    violations, worst = 0, -math.inf
    for _ in range(1000):
        depth = int(rng.integers(1, 4))
        sizes = list(rng.integers(1, 7, size=depth + 1))
        net = random_net(rng, sizes, "relu")
        L = surrogate_lipschitz(net)
        for s in rng.normal(size=(10, sizes[0])):
            j = float(np.linalg.norm(actor_jacobian(net, s), 2))
            violations += j > L + 1e-9
            worst = max(worst, j / L)
    criterion(4, violations == 0, f"{violations} violations over 10^4 states, max ||J||/L = {worst:.4f}")


def test_c05_ppo_loss_gradients(criterion):
    rng = np.random.default_rng(5)
    env = PointMass(horizon=20)
    cfg = PpoConfig(total_steps=0, num_envs=2, rollout_len=8, hidden=(6,))
    worst = 0.0
    for i in range(100):
        net = make_policy(env.obs_dim, action_dim=2, hidden=(6,), seed=i, sigma=float(rng.uniform(0.1, 1.0)))
        b = collect_rollout(net, env, cfg, rng=rng)
        args = (b.flat("obs"), b.flat("actions"), b.flat("log_probs") + rng.normal(scale=0.1, size=16),
                b.flat("advantages"), b.flat("returns"), cfg)
        params = net.parameters()
        tape = nc.Tape()
        leaves = [tape.leaf(p) for p in params]
        g = nc.grad(tape, ppo_loss(net.with_parameters(leaves), *args)[0], leaves)
        flat = np.concatenate([np.ravel(p) for p in params])
        shapes = [np.shape(p) for p in params]

        def f(v):
            ps, k = [], 0
            for shp in shapes:
                n = int(np.prod(shp))
                ps.append(v[k:k + n].reshape(shp))
                k += n
            return float(nc.value_of(ppo_loss(net.with_parameters(ps), *args)[0]))

        fd = finite_diff_grad(f, flat)
        ga = np.concatenate([np.ravel(x) for x in g])
        worst = max(worst, float(np.linalg.norm(ga - fd) / max(np.linalg.norm(fd), 1e-12)))
    criterion(5, worst < 1e-4, f"max relative error {worst:.2e} over 100 loss evaluations (limit 1e-4)")


def test_c06_pinsker(criterion):
    rng = np.random.default_rng(6)
    n = 100_000
    k = rng.integers(2, 7)
    zp, zq = rng.normal(scale=3.0, size=(n, k)), rng.normal(scale=3.0, size=(n, k))
    tv_c = 0.5 * np.abs(softmax(zp, axis=1) - softmax(zq, axis=1)).sum(axis=1)
    v_c = int(np.sum(tv_c > np.sqrt(kl(Categorical(zp), Categorical(zq)) / 2) + 1e-12))
    d = 3
    sd = rng.uniform(0.05, 2.0, size=(n, d))
    mp, mq = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    tv_g = gaussian_tv_1d(np.linalg.norm((mp - mq) / sd, axis=1))
    v_g = int(np.sum(tv_g > np.sqrt(kl(Gaussian(mp, sd), Gaussian(mq, sd)) / 2) + 1e-12))
    criterion(6, v_c == 0 and v_g == 0, f"violations: categorical {v_c}/10^5, gaussian {v_g}/10^5")


def test_c07_schedules_and_erk(criterion):
    cubic = scheduled_sparsity("cubic", 625, 1000, 0.25, 0.9)
    env = PointMass(horizon=50)
    cfg = PpoConfig(total_steps=8192, num_envs=8, rollout_len=64, minibatches=4, hidden=(32, 32), seed=7)
    res = train(cfg, env, PruneState("magnitude", 0.8, "cubic", 0.25, update_interval=4))
    off = [abs(e["realized_sparsity"] - e["scheduled_sparsity"]) * e["total"] for e in res.prune_events]
    rng = np.random.default_rng(7)
    order_bad = 0
    for _ in range(100):
        shapes = [tuple(int(x) for x in rng.integers(1, 129, size=2)) for _ in range(int(rng.integers(2, 6)))]
        sp = erk_layer_sparsities(shapes, float(rng.uniform(0.1, 0.95)))
        score = [(r + c) / (r * c) for r, c in shapes]
        order_bad += sum(score[i] < score[j] and sp[i] < sp[j] - 1e-12
                         for i in range(len(shapes)) for j in range(len(shapes)))
    ok = cubic == 0.7875 and len(off) > 0 and max(off) <= 1.0 and order_bad == 0
    criterion(7, ok, f"cubic(0.625) = {cubic!r}; {len(off)} prune events, max |realized - scheduled| = "
                     f"{max(off, default=float('nan')):.3g} params; ERK ordering violations {order_bad}/100 sets")


# ---------------------------------------------------------------------------
# 8-9, 11: desk-scale experiments
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c08_ppo_learns(criterion, trained_victims, pointmass_thresholds):
    rand, scripted = pointmass_thresholds
    threshold = 0.5 * (rand + scripted)
    env = PointMass()
    finals, ok = [], True
    for seed in SEEDS:
        net, secs = trained_victims[seed]
        ret = _rollout_return(env, lambda o, r: net.distribution(o).sample(r), 200, 7).mean()
        finals.append(f"{ret:.1f} ({secs:.0f}s)")
        ok &= ret >= threshold and secs < 600
    criterion(8, ok, f"threshold {threshold:.1f} (random {rand:.1f}, scripted {scripted:.1f}); "
                     f"final returns {', '.join(finals)}")


@pytest.mark.slow
def test_c09_attack_ordering(criterion, trained_victims):
    env = PointMass()
    pooled = {}
    for fam in ("none", "random", "mad"):
        rets = []
        for seed in SEEDS:
            ev = evaluate(trained_victims[seed][0], env, AttackSpec(fam, epsilon=EPS), 500,
                          np.random.default_rng(1000 + seed))
            rets += ev.returns
        pooled[fam] = aggregate(rets)
    c, r, m = pooled["none"], pooled["random"], pooled["mad"]
    ok = c.mean - c.ci95 > r.mean + r.ci95 and r.mean - r.ci95 > m.mean + m.ci95
    criterion(9, ok, "clean {:.2f}+-{:.2f}, random {:.2f}+-{:.2f}, mad {:.2f}+-{:.2f} (2000 episodes each)".format(
        c.mean, c.ci95, r.mean, r.ci95, m.mean, m.ci95))


@pytest.mark.slow
def test_c11_stealth_tradeoff(criterion, trained_victims):
    env = PointMass()
    lambdas = (0.1, 10.0, 1000.0)
    means = {}
    for lam in lambdas:
        per_seed = []
        for seed in SEEDS:
            spec = AttackSpec("learned", epsilon=EPS, lambda_stealth=lam)
            spec.adversary = train_adversary(trained_victims[seed][0], env, spec,
                                             PpoConfig(total_steps=200_000, seed=seed))
            per_seed.append(evaluate(trained_victims[seed][0], env, spec, 100,
                                     np.random.default_rng(seed)).mean_perturbation)
        means[lam] = float(np.mean(per_seed))
    ordered = means[0.1] > means[10.0] > means[1000.0]

    grid = GridWorld()
    adv = make_adversary(grid, AttackSpec("learned", epsilon=1.0), hidden=(16,))
    rng = np.random.default_rng(11)
    tiles, bad = 0, 0
    while tiles < 1_000_000:
        obs = grid.observe(grid.reset(rng, 512))
        out = learned_adversary_step(adv, obs, AttackSpec("learned", epsilon=1.0), rng)
        rows = out.s_hat.reshape(-1, grid.num_blocks)
        bad += int(np.sum((rows.sum(axis=1) != 1) | (np.sort(rows, axis=1)[:, -1] != 1)))
        bad += not tile_one_hot_valid(out.s_hat, grid.num_blocks)
        tiles += rows.shape[0]
    means_txt = ", ".join(f"lambda {lam:g}: {means[lam]:.4f}" for lam in lambdas)
    criterion(11, ordered and bad == 0, f"mean ||delta||_2 {means_txt}; tile violations {bad}/{tiles}")


# ---------------------------------------------------------------------------
# 10, 12-14
# ---------------------------------------------------------------------------

def test_c10_sa_inner_solver(criterion):
    rng = np.random.default_rng(10)
    worst, misses = math.inf, 0
    for _ in range(100):
        d, k = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        sigma = float(rng.uniform(0.1, 1.0))
        W = rng.normal(size=(k, d))
        net = PolicyNetwork([Layer(W, rng.normal(size=k))], [Layer(np.zeros((1, d)), np.zeros(1))],
                            GaussianHead(np.full(k, sigma)))
        cfg = PpoConfig()
        _, val = pgd_max_kl(net, rng.normal(size=(1, d)), EPS, cfg.sa_inner_steps, EPS / 2, rng)
        ratio = float(val[0]) / linear_gaussian_max_kl(W, sigma, EPS).value
        worst = min(worst, ratio)
        misses += ratio < 0.95
    criterion(10, misses == 0, f"{misses}/100 instances below 95% of the corner optimum, worst ratio {worst:.4f}")


def test_c12_prune_events_decrease_lipschitz(criterion):
    env = PointMass(horizon=100)
    cfg = PpoConfig(total_steps=32_768, num_envs=8, rollout_len=128, minibatches=8, hidden=(32, 32), seed=12)
    res = train(cfg, env, PruneState("magnitude", 0.5, "cubic", 0.25, update_interval=8))
    ev = res.prune_events
    bad = sum(e["lipschitz_after"] > e["lipschitz_before"] for e in ev)
    criterion(12, len(ev) > 0 and bad == 0,
              f"{bad} increases over {len(ev)} prune events; final sparsity {ev[-1]['realized_sparsity']:.3f}")


def test_c13_harness_arithmetic(criterion):
    a = aggregate([1.0, 2.0, 3.0])
    spot = sweet_spot({0.3: (1.0, 1.26), 0.5: (0.9, 1.1), 0.9: (0.5, 0.8)})
    rng = np.random.default_rng(13)
    bad = 0
    for _ in range(100):
        v, b, ref = rng.normal(size=20), rng.uniform(0.5, 5.0), rng.uniform(-5.0, 0.0)
        k = float(np.exp(rng.uniform(-5, 5)))
        bad += not np.allclose(normalize(k * v, k * b, k * ref), normalize(v, b, ref), rtol=1e-12, atol=1e-12)
        bad += not np.allclose(normalize(k * v, k * b), normalize(v, b), rtol=1e-12, atol=1e-12)
    ok = a.mean == 2.0 and abs(a.ci95 - 1.1316) <= 1e-4 and spot == 0.3 and bad == 0
    criterion(13, ok, f"mean {a.mean}, ci95 {a.ci95:.4f}, sweet spot {spot}, {bad} scaling failures of 100")


TINY = {"env": {"name": "pointmass", "params": {"horizon": 20}},
        "ppo": {"total_steps": 512, "num_envs": 4, "rollout_len": 32, "minibatches": 2, "update_epochs": 1,
                "hidden": [8], "kappa": 0.1},
        "prune": {"burn_in_fraction": 0.0},
        "attack": [{"family": "random"}, {"family": "mad", "pgd_steps": 2}, {"family": "value", "pgd_steps": 2},
                   {"family": "rs", "pgd_steps": 2, "td_epochs": 1, "td_refreshes": 2},
                   {"family": "learned", "train_steps": 256, "lambda_stealth": 1.0}],
        "cert": {"states": 3},
        "sweep": {"sparsities": [0.0, 0.5], "seeds": [0], "eval_episodes": 3, "reference_episodes": 4}}


def _run_all(root, cfg_path):
    w = str(root / "train" / "weights.json")
    cmds = [["train", "--criterion", "magnitude", "--sparsity", "0.5", "--out", str(root / "train")],
            ["prune", "--weights", w, "--out", str(root / "prune")],
            ["certify", "--weights", w, "--pruned", str(root / "prune" / "pruned_weights.json"),
             "--out", str(root / "certify")],
            ["attack", "--weights", w, "--episodes", "3", "--out", str(root / "attack")],
            ["sweep", "--out", str(root / "sweep")]]
    codes = [main(c + ["--config", cfg_path, "--seed", "5"]) for c in cmds]
    return codes, {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_c14_determinism(criterion, tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    codes_a, a = _run_all(tmp_path / "a", str(cfg))
    codes_b, b = _run_all(tmp_path / "b", str(cfg))
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = codes_a == codes_b == [0] * 5 and set(a) == set(b) and not differ
    criterion(14, ok, f"{len(a)} CSV files from train/prune/certify/attack/sweep, {len(differ)} differ"
                      + (f": {differ}" if differ else ""))
