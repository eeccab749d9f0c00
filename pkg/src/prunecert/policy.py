"""MLP actor-critic networks with Gaussian or categorical action heads.

Forward code is written once against :mod:`prunecert.numcore` ops, so the same
network evaluates on numpy arrays (rollouts) or on tape tensors (gradients,
Jacobians).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr

from . import numcore as nc

ACTIVATIONS = {"tanh": nc.tanh, "relu": nc.relu, "identity": nc.identity}
ACTIVATION_LIPSCHITZ = {"tanh": 1.0, "relu": 1.0, "identity": 1.0}

C_QUARTER_CATEGORICAL = 0.25
C_VERIFIED_CATEGORICAL = 1.0 / (2.0 * math.sqrt(2.0))

WEIGHT_FILE_VERSION = 1


class FamilyMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

@dataclass
class Gaussian:
    """Diagonal Gaussian; ``mean`` may carry leading batch axes."""

    mean: object
    std: object

    def log_prob(self, a):
        a = np.asarray(a, dtype=np.float64)
        z = (a - self.mean) / self.std
        per_dim = -0.5 * z * z - nc.log(self.std) - 0.5 * math.log(2.0 * math.pi)
        return nc.sum_(per_dim, axis=-1)

    def entropy(self):
        per_dim = nc.log(self.std) + 0.5 * math.log(2.0 * math.pi * math.e)
        per_dim = per_dim + 0.0 * self.mean
        return nc.sum_(per_dim, axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        mean = nc.value_of(self.mean)
        std = np.broadcast_to(nc.value_of(self.std), mean.shape)
        return mean + std * rng.standard_normal(mean.shape)

    def mode(self) -> np.ndarray:
        return nc.value_of(self.mean)


@dataclass
class Categorical:
    """Softmax distribution over the last axis of ``logits``."""

    logits: object

    @classmethod
    def from_probs(cls, probs) -> "Categorical":
        p = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(p))

    @property
    def log_probs(self):
        return nc.log_softmax(self.logits, axis=-1)

    @property
    def probs(self) -> np.ndarray:
        lv = nc.value_of(self.logits)
        z = lv - np.max(lv, axis=-1, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=-1, keepdims=True)

    @property
    def num_actions(self) -> int:
        return nc.value_of(self.logits).shape[-1]

    def log_prob(self, a):
        a = np.asarray(a)
        if np.any(a < 0) or np.any(a >= self.num_actions):
            raise IndexError(f"action index out of range [0, {self.num_actions})")
        return nc.take_along_last(self.log_probs, a.astype(np.int64))

    def entropy(self):
        lp = self.log_probs
        p = nc.exp(lp)
        return -nc.sum_(p * lp, axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs
        cum = np.cumsum(p, axis=-1)
        u = rng.random(p.shape[:-1] + (1,)) * cum[..., -1:]
        idx = np.sum(cum <= u, axis=-1)
        return np.minimum(idx, p.shape[-1] - 1).astype(np.int64)

    def mode(self) -> np.ndarray:
        return np.argmax(nc.value_of(self.logits), axis=-1)


@dataclass
class TileCategorical(Categorical):
    """Independent categoricals over a tile axis; log-probs sum across tiles."""

    def log_prob(self, a):
        return nc.sum_(super().log_prob(a), axis=-1)

    def entropy(self):
        return nc.sum_(super().entropy(), axis=-1)


Distribution = Union[Gaussian, Categorical]


def log_prob(dist, a):
    return dist.log_prob(a)


def sample(dist, rng):
    return dist.sample(rng)


def entropy(dist):
    return dist.entropy()


def _check_family(p, q):
    if type(p) is not type(q):
        raise FamilyMismatchError(f"{type(p).__name__} vs {type(q).__name__}")


def kl(p, q):
    """KL(p || q), closed form per family; batch axes are preserved."""
    _check_family(p, q)
    if isinstance(p, Gaussian):
        var_p = p.std * p.std
        var_q = q.std * q.std
        d = p.mean - q.mean
        per_dim = nc.log(q.std) - nc.log(p.std) + (var_p + d * d) / (2.0 * var_q) - 0.5
        return nc.sum_(per_dim, axis=-1)
    if isinstance(p.logits, nc.Tensor) or isinstance(q.logits, nc.Tensor):
        lp, lq = p.log_probs, q.log_probs
        return nc.sum_(nc.exp(lp) * (lp - lq), axis=-1)
    pp, qp = p.probs, q.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pp > 0, pp * (np.log(pp) - np.log(qp)), 0.0)
    terms = np.where((pp > 0) & (qp == 0), np.inf, terms)
    return np.sum(terms, axis=-1)


def gaussian_constant(std) -> float:
    """1 / sqrt(2 pi lambda_min(Sigma)) for diagonal Sigma = diag(std^2)."""
    lam_min = float(np.min(np.asarray(std, dtype=np.float64) ** 2))
    return 1.0 / math.sqrt(2.0 * math.pi * lam_min)


def tv_upper_bound(p, q, categorical_constant: float = C_VERIFIED_CATEGORICAL) -> np.ndarray:
    """Lipschitz-style TV bound: c times the l2 gap of means or logits."""
    _check_family(p, q)
    if isinstance(p, Gaussian):
        std = np.concatenate([np.ravel(nc.value_of(p.std)), np.ravel(nc.value_of(q.std))])
        d = nc.value_of(p.mean) - nc.value_of(q.mean)
        return np.linalg.norm(d, axis=-1) * gaussian_constant(std)
    d = nc.value_of(p.logits) - nc.value_of(q.logits)
    return categorical_constant * np.linalg.norm(d, axis=-1)


def _equal_std(p: Gaussian, q: Gaussian) -> bool:
    sp = np.broadcast_to(nc.value_of(p.std), np.shape(nc.value_of(p.mean)))
    sq = np.broadcast_to(nc.value_of(q.std), np.shape(nc.value_of(q.mean)))
    return bool(np.array_equal(sp, sq))


def tv_exact(p, q) -> np.ndarray:
    """Exact TV for categoricals and for Gaussians sharing a diagonal covariance.

    Equal-covariance Gaussians reduce to one dimension along the whitened
    mean gap: TV = 2 Phi(d / 2) - 1 with d the Mahalanobis distance.
    """
    _check_family(p, q)
    if isinstance(p, Categorical):
        return 0.5 * np.sum(np.abs(p.probs - q.probs), axis=-1)
    if not _equal_std(p, q):
        raise ValueError("exact Gaussian TV needs equal covariances; use tv_monte_carlo")
    std = nc.value_of(p.std)
    d = np.linalg.norm((nc.value_of(p.mean) - nc.value_of(q.mean)) / std, axis=-1)
    return 2.0 * ndtr(d / 2.0) - 1.0


@dataclass
class TvEstimate:
    value: float
    ci95: float
    method: str


def tv_monte_carlo(p, q, n: int, rng: np.random.Generator) -> TvEstimate:
    """TV estimate; exact where a closed form exists, else importance MC.

    Uses TV = E_{x~p}[(1 - q(x)/p(x))_+] with a +-1.96 SEM interval.
    """
    _check_family(p, q)
    if isinstance(p, Categorical):
        return TvEstimate(float(tv_exact(p, q)), 0.0, "exact-categorical")
    if _equal_std(p, q):
        return TvEstimate(float(tv_exact(p, q)), 0.0, "exact-gaussian")
    mean_p = nc.value_of(p.mean)
    std_p = np.broadcast_to(nc.value_of(p.std), mean_p.shape)
    x = mean_p + std_p * rng.standard_normal((n,) + mean_p.shape)
    log_ratio = np.asarray(q.log_prob(x)) - np.asarray(p.log_prob(x))
    w = np.maximum(0.0, 1.0 - np.exp(np.minimum(log_ratio, 50.0)))
    sem = float(np.std(w, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return TvEstimate(float(np.mean(w)), 1.96 * sem, "monte-carlo")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weights: object  # (out, in)
    bias: object  # (out,)
    activation: str = "identity"

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(nc.value_of(self.weights)))


@dataclass
class GaussianHead:
    sigma: np.ndarray


@dataclass
class CategoricalHead:
    num_actions: int


def mlp_forward(layers: Sequence[Layer], x):
    for layer in layers:
        x = nc.matmul(x, nc.transpose(layer.weights))
        x = ACTIVATIONS[layer.activation](x + layer.bias)
    return x


def _check_dims(layers: Sequence[Layer]):
    for prev, nxt in zip(layers, layers[1:]):
        if prev.shape[0] != nxt.shape[1]:
            raise ValueError(f"incompatible layer shapes {prev.shape} -> {nxt.shape}")


@dataclass
class PolicyNetwork:
    """Actor trunk (mean or logits) plus a separate critic trunk."""

    actor: list[Layer]
    critic: list[Layer]
    head: Union[GaussianHead, CategoricalHead]

    def __post_init__(self):
        _check_dims(self.actor)
        _check_dims(self.critic)
        if isinstance(self.head, GaussianHead):
            sigma = np.asarray(self.head.sigma, dtype=np.float64)
            if np.any(sigma <= 0):
                raise ValueError("Gaussian head needs sigma > 0")

    @property
    def input_dim(self) -> int:
        return self.actor[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.actor[-1].shape[0]

    def _check_input(self, s):
        if np.shape(nc.value_of(s))[-1] != self.input_dim:
            raise ValueError(f"state dim {np.shape(nc.value_of(s))[-1]} != network input dim {self.input_dim}")

    def actor_output(self, s):
        """g_theta(s): the Gaussian mean or the categorical logits."""
        self._check_input(s)
        return mlp_forward(self.actor, s)

    def value(self, s):
        self._check_input(s)
        v = mlp_forward(self.critic, s)
        return v[..., 0] if not isinstance(v, nc.Tensor) else nc.getitem(v, (Ellipsis, 0))

    def distribution(self, s):
        g = self.actor_output(s)
        if isinstance(self.head, GaussianHead):
            return Gaussian(g, np.asarray(self.head.sigma, dtype=np.float64))
        return Categorical(g)

    def forward(self, s):
        return self.distribution(s), self.value(s)

    # parameter plumbing -------------------------------------------------
    def layers(self) -> list[tuple[str, Layer]]:
        return [("actor-trunk", l) for l in self.actor] + [("critic-trunk", l) for l in self.critic]

    def parameters(self) -> list:
        out = []
        for _, layer in self.layers():
            out.extend([layer.weights, layer.bias])
        return out

    def weight_indices(self, include_critic: bool = True) -> list[int]:
        """Positions in :meth:`parameters` of prunable weight matrices."""
        n_actor = len(self.actor)
        idx = [2 * i for i in range(n_actor)]
        if include_critic:
            idx += [2 * (n_actor + i) for i in range(len(self.critic))]
        return idx

    def with_parameters(self, params: Sequence) -> "PolicyNetwork":
        params = list(params)
        it = iter(params)
        actor = [Layer(next(it), next(it), l.activation) for l in self.actor]
        critic = [Layer(next(it), next(it), l.activation) for l in self.critic]
        new = object.__new__(PolicyNetwork)
        new.actor, new.critic, new.head = actor, critic, self.head
        return new

    def copy(self) -> "PolicyNetwork":
        return self.with_parameters([np.array(nc.value_of(p), copy=True) for p in self.parameters()])


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def build_mlp(rng, sizes: Sequence[int], activation: str, out_gain: float) -> list[Layer]:
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        last = i == n - 1
        gain = out_gain if last else (math.sqrt(2.0) if activation == "relu" else 5.0 / 3.0 if activation == "tanh" else 1.0)
        W = orthogonal(rng, sizes[i + 1], sizes[i], gain)
        layers.append(Layer(W, np.zeros(sizes[i + 1]), "identity" if last else activation))
    return layers


def make_policy(obs_dim: int, *, action_dim: int | None = None, num_actions: int | None = None,
                hidden: Sequence[int] = (64, 64), activation: str = "tanh", sigma: float = 0.1,
                seed: int = 0) -> PolicyNetwork:
    """Orthogonally initialized actor-critic, biases zero."""
    if (action_dim is None) == (num_actions is None):
        raise ValueError("give exactly one of action_dim / num_actions")
    rng = np.random.default_rng(seed)
    out = action_dim if action_dim is not None else num_actions
    actor = build_mlp(rng, [obs_dim, *hidden, out], activation, out_gain=0.01)
    critic = build_mlp(rng, [obs_dim, *hidden, 1], activation, out_gain=1.0)
    head = GaussianHead(np.full(out, sigma)) if action_dim is not None else CategoricalHead(num_actions)
    return PolicyNetwork(actor, critic, head)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def layers_to_records(named_layers) -> list[dict]:
    recs = []
    for role, layer in named_layers:
        W = np.asarray(nc.value_of(layer.weights), dtype=np.float64)
        recs.append({
            "role": role,
            "activation": layer.activation,
            "rows": int(W.shape[0]),
            "cols": int(W.shape[1]),
            "w": [float(x) for x in W.ravel()],
            "b": [float(x) for x in np.ravel(nc.value_of(layer.bias))],
        })
    return recs


def record_to_layer(rec: dict) -> Layer:
    W = np.array(rec["w"], dtype=np.float64).reshape(rec["rows"], rec["cols"])
    return Layer(W, np.array(rec["b"], dtype=np.float64), rec["activation"])


def policy_to_dict(net: PolicyNetwork) -> dict:
    gaussian = isinstance(net.head, GaussianHead)
    return {
        "version": WEIGHT_FILE_VERSION,
        "head": "gaussian" if gaussian else "categorical",
        "sigma": [float(s) for s in net.head.sigma] if gaussian else None,
        "layers": layers_to_records(net.layers()),
    }


def policy_from_dict(doc: dict) -> PolicyNetwork:
    if doc.get("version") != WEIGHT_FILE_VERSION:
        raise ValueError(f"unsupported weight file version {doc.get('version')!r}")
    actor = [record_to_layer(r) for r in doc["layers"] if r["role"] == "actor-trunk"]
    critic = [record_to_layer(r) for r in doc["layers"] if r["role"] == "critic-trunk"]
    if doc["head"] == "gaussian":
        head = GaussianHead(np.array(doc["sigma"], dtype=np.float64))
    elif doc["head"] == "categorical":
        head = CategoricalHead(actor[-1].shape[0])
    else:
        raise ValueError(f"not a policy weight file (head={doc['head']!r})")
    return PolicyNetwork(actor, critic, head)


def save_policy(net: PolicyNetwork, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(net), indent=1) + "\n")


def load_policy(path) -> PolicyNetwork:
    return policy_from_dict(json.loads(Path(path).read_text()))


def masks_to_dict(net: PolicyNetwork, masks: dict[int, np.ndarray]) -> dict:
    """Mask file: the weight-file container with 0/1 weights and unit biases."""
    params = net.parameters()
    named = []
    for i, (role, layer) in enumerate(net.layers()):
        m = masks.get(2 * i, np.ones(layer.shape))
        named.append((role, Layer(np.asarray(m, dtype=np.float64), np.ones(np.shape(params[2 * i + 1])), layer.activation)))
    doc = policy_to_dict(net)
    doc["layers"] = layers_to_records(named)
    return doc


def masks_from_dict(doc: dict) -> dict[int, np.ndarray]:
    return {2 * i: record_to_layer(r).weights for i, r in enumerate(doc["layers"])}
