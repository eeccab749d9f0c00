"""PPO with GAE, an optional state-adversarial KL regularizer and mask pruning
interleaved with the minibatch updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import numcore as nc
from .cert import surrogate_lipschitz
from .envs import Env
from .pgd import projected_ascent
from .policy import Categorical, GaussianHead, PolicyNetwork, kl, make_policy
from .prune import PruneState, apply_masks, mask_gradients, prune_step, scheduled_sparsity


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PpoConfig:
    total_steps: int = 200_000
    learning_rate: float = 3e-4
    num_envs: int = 16
    rollout_len: int = 128
    update_epochs: int = 4
    minibatches: int = 32
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    kappa: float = 0.0
    sa_inner_steps: int = 5
    sa_step_size: Optional[float] = None  # None -> epsilon / 2
    epsilon: float = 0.075
    seed: int = 0
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    sigma: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("learning_rate", "num_envs", "rollout_len", "update_epochs", "minibatches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa < 0 or self.epsilon < 0 or self.total_steps < 0:
            raise ValueError("kappa, epsilon and total_steps must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_len

    @property
    def num_updates(self) -> int:
        return self.total_steps // self.batch_size

    @property
    def total_minibatch_steps(self) -> int:
        return self.num_updates * self.update_epochs * self.minibatches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Adam:
    def __init__(self, params: list, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list, grads: list) -> list:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def clip_grad_norm(grads: list, max_norm: float) -> tuple[list, float]:
    """Scale grads so their global l2 norm is at most ``max_norm``.

    Returns the clipped grads and the pre-clip norm.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    states: np.ndarray  # true env states, (T, N, state_dim)
    obs: np.ndarray  # what the policy saw, (T, N, obs_dim)
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None
    episode_returns: list = field(default_factory=list)
    carry: dict = field(default_factory=dict)

    def flat(self, name: str) -> np.ndarray:
        x = getattr(self, name)
        return x.reshape((-1,) + x.shape[2:])


def collect_rollout(net, env: Env, config: PpoConfig, adversary: Optional[Callable] = None,
                    rng: np.random.Generator = None, carry: Optional[dict] = None) -> RolloutBatch:
    """Run ``num_envs`` environments for ``rollout_len`` steps.

    The policy acts on ``adversary(obs, rng)`` when an adversary is given;
    the environment always steps on its true state.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n, T = config.num_envs, config.rollout_len
    if carry is None:
        carry = {"states": env.reset(rng, n), "t": np.zeros(n, dtype=np.int64), "ret": np.zeros(n)}
    S, ep_t, ep_ret = carry["states"], carry["t"].copy(), carry["ret"].copy()
    buf = {k: [] for k in ("states", "obs", "actions", "log_probs", "rewards", "values", "dones", "bonus")}
    finished = []
    for _ in range(T):
        obs = env.observe(S)
        obs_hat = obs if adversary is None else adversary(obs, rng)
        dist = net.distribution(obs_hat)
        a = dist.sample(rng)
        logp = np.asarray(dist.log_prob(a))
        v = np.asarray(net.value(obs_hat))
        tr = env.step(S, a)
        ep_ret = ep_ret + tr.r
        ep_t = ep_t + 1
        truncated = (ep_t >= env.horizon) & ~tr.done
        done = tr.done | truncated
        # a time-limit cut is not a real terminal: fold gamma * V(s_T) into the reward
        bonus = np.zeros(n)
        if np.any(truncated):
            bonus[truncated] = config.gamma * np.asarray(net.value(env.observe(tr.s_next[truncated])))
        for k, x in (("states", S), ("obs", obs_hat), ("actions", a), ("log_probs", logp),
                     ("rewards", tr.r), ("values", v), ("dones", done), ("bonus", bonus)):
            buf[k].append(x)
        S = tr.s_next
        if np.any(done):
            finished.extend(float(x) for x in ep_ret[done])
            fresh = env.reset(rng, int(done.sum()))
            S = S.copy()
            S[done] = fresh
            ep_ret = np.where(done, 0.0, ep_ret)
            ep_t = np.where(done, 0, ep_t)
    obs = env.observe(S)
    obs_hat = obs if adversary is None else adversary(obs, rng)
    bootstrap = np.asarray(net.value(obs_hat))
    bonus = np.asarray(buf.pop("bonus"))
    batch = RolloutBatch(**{k: np.asarray(v) for k, v in buf.items()})
    batch.dones = batch.dones.astype(bool)
    batch.advantages, batch.returns = gae(batch.rewards + bonus, batch.values, batch.dones,
                                          config.gamma, config.gae_lambda, bootstrap)
    batch.episode_returns = finished
    batch.carry = {"states": S, "t": ep_t, "ret": ep_ret}
    return batch


def gae(rewards, values, dones, gamma: float, lam: float, bootstrap=0.0):
    """Generalized advantage estimates along axis 0.

    ``dones[t]`` marks that the episode ended after step t, which cuts both
    the bootstrap and the advantage recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal shapes")
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    last = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# state-adversarial regularizer
# ---------------------------------------------------------------------------

def _kl_objective(net, S, S_hat):
    """Per-state KL(pi(.|s) || pi(.|s_hat)) on whatever ``S_hat`` is."""
    return kl(net.distribution(S), net.distribution(S_hat))


def fisher_direction(net, S) -> np.ndarray:
    """Top eigenvector (per state) of the Fisher information of the action
    distribution with respect to the input.

    KL(pi(.|s) || pi(.|s + d)) ~ d^T F(s) d / 2 near d = 0, so this is the
    locally steepest KL direction even though the gradient vanishes at s.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    tape = nc.Tape()
    x = tape.leaf(S)
    out = net.actor_output(x)
    K = out.value.shape[-1]
    J = np.empty((len(S), K, S.shape[1]))
    for k in range(K):
        seed = np.zeros_like(out.value)
        seed[:, k] = 1.0
        J[:, k, :] = nc.backward(tape, out, seed).get(x.index, np.zeros_like(S))
    if isinstance(net.head, GaussianHead):
        A = J / np.asarray(net.head.sigma, dtype=np.float64)[None, :, None]
    else:
        p = Categorical(out.value).probs
        # diag(p) - p p^T = B^T B with B = diag(sqrt p)(I - 1 p^T)
        B = np.sqrt(p)[:, :, None] * (np.eye(K)[None] - p[:, None, :])
        A = B @ J
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    return vt[:, 0, :]


def pgd_max_kl(net, S, epsilon: float, steps: int, step_size: float,
               rng: Optional[np.random.Generator] = None, jitter: float = 0.1,
               norm_p: float = math.inf, fisher_start: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Sign-gradient ascent on s_hat -> KL(pi(.|s) || pi(.|s_hat)) inside the
    ball of radius ``epsilon``; best iterate per state and its KL.

    The KL gradient vanishes at s_hat = s, so one run starts from
    s + U(-jitter eps, jitter eps). With ``fisher_start`` two more runs
    start half-way out along +/- the top Fisher direction.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    frozen = net.with_parameters([nc.value_of(p) for p in net.parameters()])
    rng = np.random.default_rng(0) if rng is None else rng
    starts = [S + rng.uniform(-jitter * epsilon, jitter * epsilon, S.shape)]
    if fisher_start and epsilon > 0 and steps > 0:
        v = fisher_direction(frozen, S)
        d = np.sign(v) if norm_p == math.inf else v
        starts += [S + 0.5 * epsilon * d, S - 0.5 * epsilon * d]
    p_dist = frozen.distribution(S)
    objective = lambda x: kl(p_dist, frozen.distribution(x))  # noqa: E731
    best_x, best_val = None, None
    for start in starts:
        x, val = projected_ascent(objective, S, epsilon, steps, step_size, start=start, norm_p=norm_p)
        if best_x is None:
            best_x, best_val = x, val
        else:
            better = val > best_val
            best_x[better], best_val[better] = x[better], val[better]
    return best_x, best_val


def sa_regularizer(net, states, epsilon: float, inner_steps: int = 5, step_size: Optional[float] = None,
                   rng: Optional[np.random.Generator] = None):
    """Batch mean of max_{s_hat in B(s)} KL(pi(.|s) || pi(.|s_hat)).

    The inner maximizer is found with frozen parameters; the returned value
    is then recomputed with ``net`` so gradients reach both KL arguments.
    """
    S = np.atleast_2d(np.asarray(nc.value_of(states), dtype=np.float64))
    step = epsilon / 2.0 if step_size is None else step_size
    S_hat, _ = pgd_max_kl(net, S, epsilon, inner_steps, step, rng)
    return nc.mean(_kl_objective(net, S, S_hat))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class Learner:
    """Mutable training state: stored parameters, optimizer and masks."""

    net: object
    config: PpoConfig
    prune_state: PruneState
    optimizer: Adam = None
    step: int = 0
    total_steps: int = 0
    prune_events: list = field(default_factory=list)
    last_grads: list = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam([np.asarray(p) for p in self.net.parameters()], self.config.learning_rate)
        if self.prune_state.active and not self.prune_state.masks:
            self.prune_state.init_masks(self.net)

    def effective_net(self):
        """Network as used in the forward pass (masked weights)."""
        if not self.prune_state.masks:
            return self.net
        return self.net.with_parameters(apply_masks(self.net.parameters(), self.prune_state.masks))


def ppo_loss(net, obs, actions, old_log_probs, advantages, returns, config: PpoConfig,
             rng: Optional[np.random.Generator] = None):
    """Returns (total loss tensor, dict of float terms)."""
    dist = net.distribution(obs)
    logp = dist.log_prob(actions)
    ratio = nc.exp(logp - old_log_probs)
    adv = (advantages - advantages.mean()) / max(float(advantages.std()), 1e-8)
    surr = nc.minimum(ratio * adv, nc.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * adv)
    loss_pi = -nc.mean(surr)
    v = net.value(obs)
    loss_v = nc.mean(nc.square(v - returns))
    ent = nc.mean(dist.entropy())
    loss = loss_pi + config.value_coef * loss_v - config.entropy_coef * ent
    r_sa = 0.0
    if config.kappa > 0:
        reg = sa_regularizer(net, obs, config.epsilon, config.sa_inner_steps, config.sa_step_size, rng)
        loss = loss + config.kappa * reg
        r_sa = float(nc.value_of(reg))
    terms = {"loss_pi": float(nc.value_of(loss_pi)), "loss_v": float(nc.value_of(loss_v)),
             "entropy": float(nc.value_of(ent)), "r_sa": r_sa}
    return loss, terms


def ppo_update(learner: Learner, batch: RolloutBatch, rng: np.random.Generator) -> dict:
    """Epochs of clipped-surrogate minibatch steps, pruning after each step
    once past burn-in."""
    cfg, ps = learner.config, learner.prune_state
    obs, actions = batch.flat("obs"), batch.flat("actions")
    old_logp, adv, ret = batch.flat("log_probs"), batch.flat("advantages"), batch.flat("returns")
    n = len(obs)
    if n == 0:
        raise ValueError("empty batch")
    mb = max(1, n // cfg.minibatches)
    sums = {"loss_pi": 0.0, "loss_v": 0.0, "entropy": 0.0, "r_sa": 0.0, "grad_norm": 0.0}
    count = 0
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            if len(idx) == 0:
                continue
            params = learner.effective_net().parameters()
            tape = nc.Tape()
            leaves = [tape.leaf(p) for p in params]
            loss, terms = ppo_loss(learner.net.with_parameters(leaves), obs[idx], actions[idx],
                                   old_logp[idx], adv[idx], ret[idx], cfg, rng)
            if not np.isfinite(loss.value):
                raise NonFiniteLossError(f"non-finite PPO loss at step {learner.step}: {terms}")
            grads = nc.grad(tape, loss, leaves)
            learner.last_grads = grads
            grads = mask_gradients(grads, ps.masks, ps.criterion)
            grads, gnorm = clip_grad_norm(grads, cfg.max_grad_norm)
            stored = [np.asarray(p) for p in learner.net.parameters()]
            stored = learner.optimizer.step(stored, grads)
            if ps.masks and ps.criterion != "magnitude_ste":
                stored = apply_masks(stored, ps.masks)
            learner.net = learner.net.with_parameters(stored)
            learner.step += 1
            for key, val in terms.items():
                sums[key] += val
            sums["grad_norm"] += gnorm
            count += 1
            if ps.is_update_step(learner.step, learner.total_steps):
                _prune_event(learner)
    return {k: v / max(count, 1) for k, v in sums.items()}


def _prune_event(learner: Learner) -> None:
    ps = learner.prune_state
    before = surrogate_lipschitz(learner.effective_net())
    dense_before = surrogate_lipschitz(learner.net)
    prune_step(ps, learner.net, learner.step, learner.total_steps, learner.last_grads)
    if ps.criterion != "magnitude_ste":
        learner.net = learner.net.with_parameters(apply_masks(learner.net.parameters(), ps.masks))
    after = surrogate_lipschitz(learner.effective_net())
    learner.prune_events.append({
        "step": learner.step,
        "scheduled_sparsity": scheduled_sparsity(ps.schedule, learner.step, learner.total_steps,
                                                 ps.burn_in_fraction, ps.target_sparsity),
        "realized_sparsity": ps.realized_sparsity(),
        "kept": int(sum(m.sum() for m in ps.masks.values())),
        "total": int(sum(m.size for m in ps.masks.values())),
        "lipschitz_before": before,
        "lipschitz_after": after,
        "lipschitz_dense": dense_before,
    })


METRIC_COLUMNS = ["step", "return_mean", "return_std", "loss_pi", "loss_v", "entropy", "r_sa",
                  "sparsity", "lipschitz", "grad_norm"]


@dataclass
class TrainResult:
    net: object  # effective (masked) network
    stored_net: object
    masks: dict
    metrics: list[dict]
    prune_events: list[dict]


def init_policy(env: Env, config: PpoConfig) -> PolicyNetwork:
    kwargs = {"action_dim": env.action_dim} if env.continuous else {"num_actions": env.num_actions}
    return make_policy(env.obs_dim, hidden=config.hidden, activation=config.activation,
                       sigma=config.sigma, seed=config.seed, **kwargs)


def train(config: PpoConfig, env: Env, prune_state: Optional[PruneState] = None,
          adversary: Optional[Callable] = None, agent=None,
          callback: Optional[Callable[[dict, PolicyNetwork], None]] = None) -> TrainResult:
    """PPO training loop; masks update after optimizer steps past burn-in.

    ``callback(row, net)`` runs after every update with the metrics row and
    the current masked network.
    """
    prune_state = PruneState() if prune_state is None else prune_state
    net = init_policy(env, config) if agent is None else agent
    rng = np.random.default_rng(config.seed)
    learner = Learner(net, config, prune_state)
    learner.total_steps = config.total_minibatch_steps
    metrics = []
    carry = None
    for update in range(config.num_updates):
        batch = collect_rollout(learner.effective_net(), env, config, adversary, rng, carry)
        carry = batch.carry
        terms = ppo_update(learner, batch, rng)
        rets = batch.episode_returns
        row = {
            "step": (update + 1) * config.batch_size,
            "return_mean": float(np.mean(rets)) if rets else float("nan"),
            "return_std": float(np.std(rets)) if rets else float("nan"),
            **{k: terms[k] for k in ("loss_pi", "loss_v", "entropy", "r_sa")},
            "sparsity": prune_state.realized_sparsity() if prune_state.masks else 0.0,
            "lipschitz": surrogate_lipschitz(learner.effective_net()) if isinstance(net, PolicyNetwork) else float("nan"),
            "grad_norm": terms["grad_norm"],
        }
        metrics.append(row)
        if callback is not None:
            callback(row, learner.effective_net())
    return TrainResult(learner.effective_net(), learner.net, dict(prune_state.masks), metrics,
                       learner.prune_events)
