"""Test-time observation attacks and the learned PPO adversary."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .envs import Env, GridWorld, Transition
from .pgd import project, projected_ascent
from .policy import (
    WEIGHT_FILE_VERSION,
    Gaussian,
    Layer,
    TileCategorical,
    build_mlp,
    layers_to_records,
    mlp_forward,
    record_to_layer,
    tv_exact,
)
from .rl import Adam, PpoConfig, pgd_max_kl, train

SIGMA_FLOOR = 1e-4
FAMILIES = ("none", "random", "mad", "value", "rs", "learned")


def _norm_p(p) -> float:
    if isinstance(p, str):
        p = {"inf": math.inf, "linf": math.inf, "2": 2, "l2": 2}.get(p.lower(), p)
    p = float(p)
    if p not in (2.0, math.inf):
        raise ValueError("norm_p must be 2 or inf")
    return math.inf if p == math.inf else 2


@dataclass
class AttackSpec:
    family: str = "none"
    epsilon: float = 0.075
    norm_p: float = math.inf
    pgd_steps: int = 10
    pgd_step_size: Optional[float] = None  # None -> epsilon / 4
    # robust Sarsa
    q_hidden_size: int = 64
    td_epochs: int = 3
    td_refreshes: int = 20
    robust_perturb_scale: float = 1.0
    robust_samples: int = 4
    # learned adversary
    attack_rate: float = 1.0
    lambda_stealth: float = 0.0
    max_flips: Optional[int] = None
    adversary: object = None
    q_model: object = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 <= self.attack_rate <= 1.0:
            raise ValueError("attack_rate must lie in [0, 1]")
        self.norm_p = _norm_p(self.norm_p)

    @property
    def step_size(self) -> float:
        return self.epsilon / 4.0 if self.pgd_step_size is None else self.pgd_step_size


# ---------------------------------------------------------------------------
# gradient-free and gradient attacks on a fixed victim
# ---------------------------------------------------------------------------

def random_attack(s, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the l-inf box or (volume-uniform) l2 ball around s."""
    s = np.asarray(s, dtype=np.float64)
    eps = spec.epsilon
    if eps == 0:
        return s.copy()
    if spec.norm_p == math.inf:
        return s + rng.uniform(-eps, eps, s.shape)
    D = s.shape[-1]
    u = rng.standard_normal(s.shape)
    u /= np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-300)
    r = eps * rng.random(s.shape[:-1] + (1,)) ** (1.0 / D)
    return s + r * u


def mad_attack(net, s, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Maximal action difference: PGD ascent on KL(pi(.|s) || pi(.|s_hat))."""
    single = np.ndim(s) == 1
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    x, _ = pgd_max_kl(net, S, spec.epsilon, spec.pgd_steps, spec.step_size, rng, norm_p=spec.norm_p)
    return x[0] if single else x


def value_attack(net, s, spec: AttackSpec) -> np.ndarray:
    """PGD descent on the critic's value of the perturbed observation."""
    single = np.ndim(s) == 1
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    x, _ = projected_ascent(lambda z: -net.value(z), S, spec.epsilon, spec.pgd_steps, spec.step_size,
                            norm_p=spec.norm_p)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# robust Sarsa
# ---------------------------------------------------------------------------

@dataclass
class Trajectories:
    obs: np.ndarray
    actions: np.ndarray  # action features: continuous actions or one-hot
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def action_features(net, obs):
    """Mean action for Gaussian policies, probability vector for categorical
    ones; differentiable in ``obs``."""
    dist = net.distribution(obs)
    if isinstance(dist, Gaussian):
        return dist.mean
    return nc.softmax(dist.logits, axis=-1)


def collect_trajectories(victim, env: Env, episodes: int, rng: np.random.Generator) -> Trajectories:
    """Clean victim rollouts flattened into transitions."""
    S = env.reset(rng, episodes)
    alive = np.ones(episodes, dtype=bool)
    parts = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "terminals")}
    for _ in range(env.horizon):
        if not alive.any():
            break
        obs = env.observe(S[alive])
        a = victim.distribution(obs).sample(rng)
        tr = env.step(S[alive], a)
        feats = a if env.continuous else np.eye(env.num_actions)[a]
        for k, v in (("obs", obs), ("actions", feats), ("rewards", tr.r),
                     ("next_obs", env.observe(tr.s_next)), ("terminals", tr.done)):
            parts[k].append(np.asarray(v))
        S = S.copy()
        S[alive] = tr.s_next
        idx = np.flatnonzero(alive)
        alive[idx[tr.done]] = False
    return Trajectories(**{k: np.concatenate(v) for k, v in parts.items()})


@dataclass
class QModel:
    """MLP on concat(observation, action features)."""

    layers: list[Layer]

    def __call__(self, obs, act):
        out = mlp_forward(self.layers, nc.concat([obs, act], axis=-1))
        return nc.getitem(out, (Ellipsis, 0)) if isinstance(out, nc.Tensor) else out[..., 0]

    def parameters(self) -> list:
        return [p for l in self.layers for p in (l.weights, l.bias)]

    def with_parameters(self, params) -> "QModel":
        it = iter(params)
        return QModel([Layer(next(it), next(it), l.activation) for l in self.layers])


def fit_robust_q(victim, traj: Trajectories, spec: AttackSpec, gamma: float, rng: np.random.Generator,
                 lr: float = 1e-3, minibatch: int = 256) -> QModel:
    """Fitted TD evaluation of the victim's Q.

    Each target is r + gamma * min_k Q(s'_k, a(s'_k)) over successors
    perturbed uniformly within robust_perturb_scale * eps; with scale 0 this
    is plain Sarsa-style TD.
    """
    if len(traj) == 0:
        raise ValueError("robust Sarsa needs a non-empty trajectory buffer")
    in_dim = traj.obs.shape[1] + traj.actions.shape[1]
    hidden = [spec.q_hidden_size] if spec.q_hidden_size > 0 else []
    q = QModel(build_mlp(rng, [in_dim, *hidden, 1], "tanh", out_gain=1.0))
    opt = Adam(q.parameters(), lr)
    radius = spec.robust_perturb_scale * spec.epsilon
    k = spec.robust_samples if radius > 0 else 1
    n = len(traj)
    live = 1.0 - traj.terminals.astype(np.float64)
    for _ in range(spec.td_refreshes):
        nexts = []
        for _ in range(k):
            s2 = traj.next_obs if radius == 0 else traj.next_obs + rng.uniform(-radius, radius, traj.next_obs.shape)
            nexts.append(q(s2, action_features(victim, s2)))
        y = traj.rewards + gamma * live * np.min(nexts, axis=0)
        for _ in range(spec.td_epochs):
            perm = rng.permutation(n)
            for i in range(0, n, minibatch):
                idx = perm[i:i + minibatch]
                tape = nc.Tape()
                leaves = [tape.leaf(p) for p in q.parameters()]
                loss = nc.mean(nc.square(q.with_parameters(leaves)(traj.obs[idx], traj.actions[idx]) - y[idx]))
                grads = nc.grad(tape, loss, leaves)
                q = q.with_parameters(opt.step([np.asarray(p) for p in q.parameters()], grads))
    return q


def rs_attack(net, s, spec: AttackSpec, q_model: Optional[QModel] = None,
              trajectories: Optional[Trajectories] = None, gamma: float = 0.99,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Perturb toward the lowest Q(s, a(s_hat)) under a robust TD Q-model."""
    q = q_model if q_model is not None else spec.q_model
    if q is None:
        if trajectories is None:
            raise ValueError("rs_attack needs a fitted q_model or a trajectory buffer")
        q = fit_robust_q(net, trajectories, spec, gamma, np.random.default_rng(0) if rng is None else rng)
    single = np.ndim(s) == 1
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    x, _ = projected_ascent(lambda z: -q(S, action_features(net, z)), S, spec.epsilon, spec.pgd_steps,
                            spec.step_size, norm_p=spec.norm_p)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# learned adversary
# ---------------------------------------------------------------------------

@dataclass
class AdversaryNet:
    """Perturbation policy.

    kind "gaussian": actor emits (mu, z) for an additive delta, with
    sigma = 1e-4 + (eps - 1e-4) * sigmoid(z) so it stays inside [1e-4, eps]
    without a flat (zero-gradient) clamp region. kind "tile": actor emits one logit vector
    per tile; ``keep_bias`` is added to the logit of each tile's current block.
    """

    actor: list[Layer]
    critic: list[Layer]
    kind: str
    epsilon: float
    num_blocks: int = 0
    keep_bias: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.actor[0].shape[1]

    def distribution(self, obs):
        out = mlp_forward(self.actor, obs)
        if self.kind == "gaussian":
            D = self.input_dim
            mean = nc.getitem(out, (Ellipsis, slice(0, D)))
            z = nc.getitem(out, (Ellipsis, slice(D, 2 * D)))
            hi = max(self.epsilon, SIGMA_FLOOR)
            std = SIGMA_FLOOR + (hi - SIGMA_FLOOR) / (1.0 + nc.exp(-z))
            return Gaussian(mean, std)
        shape = np.shape(nc.value_of(out))[:-1] + (-1, self.num_blocks)
        logits = nc.reshape(out, shape)
        if self.keep_bias:
            logits = logits + self.keep_bias * np.reshape(nc.value_of(obs), shape)
        return TileCategorical(logits)

    def value(self, obs):
        v = mlp_forward(self.critic, obs)
        return nc.getitem(v, (Ellipsis, 0)) if isinstance(v, nc.Tensor) else v[..., 0]

    def layers(self) -> list[tuple[str, Layer]]:
        return [("actor-trunk", l) for l in self.actor] + [("critic-trunk", l) for l in self.critic]

    def parameters(self) -> list:
        return [p for _, l in self.layers() for p in (l.weights, l.bias)]

    def weight_indices(self, include_critic: bool = True) -> list[int]:
        n = len(self.actor) + (len(self.critic) if include_critic else 0)
        return [2 * i for i in range(n)]

    def with_parameters(self, params) -> "AdversaryNet":
        it = iter(list(params))
        actor = [Layer(next(it), next(it), l.activation) for l in self.actor]
        critic = [Layer(next(it), next(it), l.activation) for l in self.critic]
        return AdversaryNet(actor, critic, self.kind, self.epsilon, self.num_blocks, self.keep_bias)


def make_adversary(env: Env, spec: AttackSpec, hidden: Sequence[int] = (64, 64), activation: str = "tanh",
                   seed: int = 0, keep_bias: float = 0.0) -> AdversaryNet:
    rng = np.random.default_rng(seed)
    D = env.obs_dim
    if isinstance(env, GridWorld):
        kind, out, blocks = "tile", D, env.num_blocks
    elif env.continuous:
        kind, out, blocks = "gaussian", 2 * D, 0
    else:
        raise ValueError("learned adversary needs a continuous env or a tile gridworld")
    actor = build_mlp(rng, [D, *hidden, out], activation, out_gain=0.01)
    critic = build_mlp(rng, [D, *hidden, 1], activation, out_gain=1.0)
    return AdversaryNet(actor, critic, kind, spec.epsilon, blocks, keep_bias)


def adversary_to_dict(adv: AdversaryNet) -> dict:
    return {
        "version": WEIGHT_FILE_VERSION,
        "head": "adversary",
        "sigma": None,
        "adversary": {"kind": adv.kind, "epsilon": adv.epsilon, "num_blocks": adv.num_blocks,
                      "keep_bias": adv.keep_bias},
        "layers": layers_to_records(adv.layers()),
    }


def adversary_from_dict(doc: dict) -> AdversaryNet:
    if doc.get("head") != "adversary":
        raise ValueError("not an adversary weight file")
    meta = doc["adversary"]
    actor = [record_to_layer(r) for r in doc["layers"] if r["role"] == "actor-trunk"]
    critic = [record_to_layer(r) for r in doc["layers"] if r["role"] == "critic-trunk"]
    return AdversaryNet(actor, critic, meta["kind"], float(meta["epsilon"]), int(meta["num_blocks"]),
                        float(meta["keep_bias"]))


def tiles_of(obs, num_blocks: int) -> np.ndarray:
    """Block id per tile from a flattened one-hot observation."""
    x = np.asarray(obs)
    return np.argmax(x.reshape(x.shape[:-1] + (-1, num_blocks)), axis=-1)


def apply_perturbation(obs, action, mask, spec: AttackSpec, kind: str, num_blocks: int = 0):
    """Perturbed observation and stealth norm for a batch of adversary actions.

    gaussian: s_hat = s + m * proj(delta), stealth = m * ||proj(delta)||_2.
    tile: tiles where m is set take the sampled block; stealth counts changed
    tiles (Hamming), optionally capped at ``spec.max_flips`` per step.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    m = np.asarray(mask, dtype=bool).reshape(len(obs))
    if kind == "gaussian":
        delta = np.atleast_2d(np.asarray(action, dtype=np.float64))
        d = project(delta, np.zeros_like(delta), spec.epsilon, spec.norm_p)
        d = np.where(m[:, None], d, 0.0)
        return obs + d, np.linalg.norm(d, axis=-1)
    orig = tiles_of(obs, num_blocks)
    b = np.atleast_2d(np.asarray(action, dtype=np.int64))
    flip = (b != orig) & m[:, None]
    if spec.max_flips is not None:
        flip &= np.cumsum(flip, axis=-1) <= spec.max_flips
    ids = np.where(flip, b, orig)
    s_hat = np.eye(num_blocks)[ids].reshape(obs.shape)
    return s_hat, flip.sum(axis=-1).astype(np.float64)


@dataclass
class AdversaryStep:
    s_hat: np.ndarray
    log_prob: np.ndarray  # log p(delta) + log p(m)
    stealth: np.ndarray
    action: np.ndarray
    mask: np.ndarray


def learned_adversary_step(adv: AdversaryNet, s, spec: AttackSpec, rng: np.random.Generator) -> AdversaryStep:
    single = np.ndim(s) == 1
    obs = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if adv.kind == "tile" and np.shape(obs)[-1] % max(adv.num_blocks, 1):
        raise ValueError("tile adversary applied to a non-tile observation")
    dist = adv.distribution(obs)
    a = dist.sample(rng)
    m = rng.random(len(obs)) < spec.attack_rate
    r = spec.attack_rate
    with np.errstate(divide="ignore"):
        lp_m = np.where(m, np.log(r), np.log1p(-r))
    s_hat, stealth = apply_perturbation(obs, a, m, spec, adv.kind, adv.num_blocks)
    out = AdversaryStep(s_hat, np.asarray(dist.log_prob(a)) + lp_m, stealth, a, m)
    if single:
        out = AdversaryStep(s_hat[0], out.log_prob[0], stealth[0], a[0], m[0])
    return out


class AdversarialEnv(Env):
    """The adversary's MDP: its action perturbs what a frozen victim sees.

    The adversary observes the clean observation; reward is
    -(victim reward) - lambda_stealth * stealth. Mask draws and victim
    action samples come from the wrapper's own generator.
    """

    def __init__(self, base: Env, victim, spec: AttackSpec, kind: str, num_blocks: int = 0, seed: int = 0):
        self.base, self.victim, self.spec = base, victim, spec
        self.kind, self.num_blocks = kind, num_blocks
        self.name = f"adversary-{base.name}"
        self.state_dim, self.obs_dim = base.state_dim, base.obs_dim
        self.horizon, self.r_max = base.horizon, base.r_max
        self.action_dim = base.obs_dim if kind == "gaussian" else None
        self.num_actions = None
        self.action_low, self.action_high = -math.inf, math.inf
        self._rng = np.random.default_rng(seed)
        self.stealth_log: list[float] = []

    def _reset(self, rng, n):
        return self.base.reset(rng, n)

    def observe(self, state):
        return self.base.observe(state)

    def _check_action(self, action, n):
        if self.kind == "gaussian":
            return super()._check_action(action, n)
        return np.asarray(action, dtype=np.int64).reshape(n, -1)

    def _step(self, S, A):
        obs = self.base.observe(S)
        m = self._rng.random(len(S)) < self.spec.attack_rate
        s_hat, stealth = apply_perturbation(obs, A, m, self.spec, self.kind, self.num_blocks)
        a_victim = self.victim.distribution(s_hat).sample(self._rng)
        tr: Transition = self.base.step(S, a_victim)
        self.stealth_log.extend(float(x) for x in stealth[m])
        return tr.s_next, -tr.r - self.spec.lambda_stealth * stealth, tr.done


def train_adversary(victim, env: Env, spec: AttackSpec, config: PpoConfig, hidden: Sequence[int] = (64, 64),
                    keep_bias: float = 0.0) -> AdversaryNet:
    """PPO on the adversarial MDP against a frozen copy of ``victim``."""
    frozen = victim.copy() if hasattr(victim, "copy") else victim
    adv = make_adversary(env, spec, hidden, config.activation, config.seed, keep_bias)
    wrapped = AdversarialEnv(env, frozen, spec, adv.kind, adv.num_blocks, seed=config.seed + 1)
    return train(config, wrapped, agent=adv).net


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_attack(spec: AttackSpec, victim, env: Optional[Env] = None, rng: Optional[np.random.Generator] = None,
                gamma: float = 0.99, rs_episodes: int = 32) -> Callable:
    """Callable (obs, rng) -> perturbed obs for evaluation loops.

    Robust Sarsa fits its Q-model here (from clean victim rollouts on
    ``env``) unless ``spec.q_model`` is already set.
    """
    fam = spec.family
    if fam == "none" or spec.epsilon == 0 and fam != "learned":
        return lambda obs, rng: obs
    if fam == "random":
        return lambda obs, rng: random_attack(obs, spec, rng)
    if fam == "mad":
        return lambda obs, rng: mad_attack(victim, obs, spec, rng)
    if fam == "value":
        return lambda obs, rng: value_attack(victim, obs, spec)
    if fam == "rs":
        q = spec.q_model
        if q is None:
            if env is None:
                raise ValueError("rs attack needs an env to collect victim trajectories")
            rng = np.random.default_rng(0) if rng is None else rng
            q = fit_robust_q(victim, collect_trajectories(victim, env, rs_episodes, rng), spec, gamma, rng)
        return lambda obs, rng: rs_attack(victim, obs, spec, q_model=q)
    if spec.adversary is None:
        raise ValueError("learned attack needs spec.adversary")
    return lambda obs, rng: learned_adversary_step(spec.adversary, obs, spec, rng).s_hat


@dataclass
class EvalResult:
    mean: float
    std: float
    sem: Optional[float]
    ci95: Optional[float]
    returns: list[float]
    f_hat: float
    mean_perturbation: float
    tv_per_step: list[float] = field(default_factory=list, repr=False)


def evaluate(victim, env: Env, attack, episodes: int, rng: np.random.Generator,
             deterministic: bool = False) -> EvalResult:
    """Run ``episodes`` attacked episodes in one batch.

    ``attack`` is an :class:`AttackSpec` or an (obs, rng) -> obs callable.
    F-hat is the mean exact TV between clean and attacked action
    distributions over all visited steps.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    fn = make_attack(attack, victim, env, rng) if isinstance(attack, AttackSpec) else attack
    S = env.reset(rng, episodes)
    alive = np.ones(episodes, dtype=bool)
    ret = np.zeros(episodes)
    tvs, pert = [], []
    for _ in range(env.horizon):
        if not alive.any():
            break
        obs = env.observe(S[alive])
        obs_hat = fn(obs, rng)
        clean, attacked = victim.distribution(obs), victim.distribution(obs_hat)
        a = attacked.mode() if deterministic else attacked.sample(rng)
        tr = env.step(S[alive], a)
        tvs.append(np.clip(tv_exact(clean, attacked), 0.0, 1.0))
        pert.append(np.linalg.norm(obs_hat - obs, axis=-1))
        ret[alive] += tr.r
        S = S.copy()
        S[alive] = tr.s_next
        idx = np.flatnonzero(alive)
        alive[idx[tr.done]] = False
    tv = np.concatenate(tvs) if tvs else np.zeros(0)
    n = episodes
    sem = float(np.std(ret, ddof=1) / math.sqrt(n)) if n > 1 else None
    return EvalResult(
        mean=float(ret.mean()),
        std=float(ret.std(ddof=1)) if n > 1 else 0.0,
        sem=sem,
        ci95=None if sem is None else 1.96 * sem,
        returns=[float(x) for x in ret],
        f_hat=float(tv.mean()) if tv.size else 0.0,
        mean_perturbation=float(np.concatenate(pert).mean()) if pert else 0.0,
        tv_per_step=[float(x) for x in tv],
    )
