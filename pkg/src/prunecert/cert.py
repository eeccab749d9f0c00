"""Certified robustness quantities for (pruned) stochastic MLP policies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .policy import (
    ACTIVATION_LIPSCHITZ,
    C_VERIFIED_CATEGORICAL,
    GaussianHead,
    Layer,
    PolicyNetwork,
    gaussian_constant,
    mlp_forward,
    tv_exact,
)


@dataclass(frozen=True)
class MdpConstants:
    gamma: float
    r_max: float
    epsilon: float
    norm_p: float = 2  # 2 or math.inf

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.norm_p not in (2, math.inf):
            raise ValueError("norm_p must be 2 or inf")

    def l2_epsilon(self, state_dim: int) -> float:
        """Radius of an l2 ball covering the perturbation set.

        An l-inf box of half-width eps sits inside the l2 ball of radius
        sqrt(D) * eps.
        """
        if self.norm_p == 2:
            return self.epsilon
        return math.sqrt(state_dim) * self.epsilon


@dataclass
class CertReport:
    surrogate_lipschitz: float
    alpha: float
    c: float
    epsilon_l2: float
    global_bound: float
    local_bounds: list[float] = field(default_factory=list)
    beta_smoothness: float = 0.0
    path_sensitivity: float = 0.0
    delta_theta_norm: float = 0.0
    three_term: tuple[float, float, float] = (0.0, 0.0, 0.0)
    notes: list[str] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(self.three_term))

    def csv_row(self) -> dict:
        lb = np.asarray(self.local_bounds, dtype=np.float64)
        return {
            "lipschitz": self.surrogate_lipschitz,
            "alpha": self.alpha,
            "c": self.c,
            "global_bound": self.global_bound,
            "local_bound_mean": float(lb.mean()) if lb.size else 0.0,
            "local_bound_max": float(lb.max()) if lb.size else 0.0,
            "l_par": self.path_sensitivity,
            "delta_theta": self.delta_theta_norm,
            "term1": self.three_term[0],
            "term2": self.three_term[1],
            "term3": self.three_term[2],
            "total": self.total,
        }


EXACT_OPNORM_MAX_ENTRIES = 4_000_000

CSV_COLUMNS = ["lipschitz", "alpha", "c", "global_bound", "local_bound_mean", "local_bound_max",
               "l_par", "delta_theta", "term1", "term2", "term3", "total"]


@dataclass
class EmpiricalRobustness:
    f_theta_estimate: float
    b_theta_estimate: float
    tv_max_per_state: list[float]


def layer_surrogate(W) -> float:
    """min(||W||_F, sqrt(||W||_1 ||W||_inf)); monotone in |W_ij|."""
    return min(nc.frobenius_norm(W), math.sqrt(nc.one_norm(W) * nc.inf_norm(W)))


def surrogate_lipschitz(net_or_layers) -> float:
    """Product of activation constants and per-layer norm surrogates.

    Accepts a :class:`PolicyNetwork` (its actor trunk is used) or a plain
    list of layers. Biases are ignored.
    """
    layers: Sequence[Layer] = net_or_layers.actor if isinstance(net_or_layers, PolicyNetwork) else net_or_layers
    if not layers:
        raise ValueError("surrogate_lipschitz of an empty network")
    out = 1.0
    for layer in layers[:-1]:
        out *= ACTIVATION_LIPSCHITZ[layer.activation]
    for layer in layers:
        out *= layer_surrogate(nc.value_of(layer.weights))
    return out


def alpha(constants: MdpConstants) -> float:
    g = constants.gamma
    if g >= 1.0:
        raise ValueError("gamma must be < 1")
    return 2.0 * (1.0 + g / (1.0 - g) ** 2) * constants.r_max


def policy_constant(net: PolicyNetwork, categorical_constant: float = C_VERIFIED_CATEGORICAL) -> float:
    """TV-per-output-distance constant c for the network's head."""
    if isinstance(net.head, GaussianHead):
        return gaussian_constant(net.head.sigma)
    return categorical_constant


def global_bound(net: PolicyNetwork, constants: MdpConstants,
                 categorical_constant: float = C_VERIFIED_CATEGORICAL) -> float:
    eps = constants.l2_epsilon(net.input_dim)
    return alpha(constants) * policy_constant(net, categorical_constant) * surrogate_lipschitz(net) * eps


def actor_jacobian(net: PolicyNetwork, s) -> np.ndarray:
    return nc.input_jacobian(net.actor_output, s)


def local_bound(net: PolicyNetwork, s, constants: MdpConstants, beta_smoothness: float = 0.0,
                categorical_constant: float = C_VERIFIED_CATEGORICAL) -> float:
    """c * (||J_g(s)||_op eps + beta eps^2 / 2) at a single state.

    ``beta_smoothness`` is a user-supplied Lipschitz constant of the
    Jacobian; 0 is exact a.e. for ReLU and linear trunks only.
    """
    if beta_smoothness < 0:
        raise ValueError("beta_smoothness must be >= 0")
    eps = constants.l2_epsilon(net.input_dim)
    if eps == 0:
        return 0.0
    jnorm = nc.spectral_norm(actor_jacobian(net, s))
    return policy_constant(net, categorical_constant) * (jnorm * eps + 0.5 * beta_smoothness * eps * eps)


# ---------------------------------------------------------------------------
# pruning-path sensitivity
# ---------------------------------------------------------------------------

def _weight_vector(net: PolicyNetwork) -> np.ndarray:
    return np.concatenate([np.ravel(nc.value_of(l.weights)) for l in net.actor])


def _check_same_arch(a: PolicyNetwork, b: PolicyNetwork):
    sa = [(l.shape, l.activation) for l in a.actor]
    sb = [(l.shape, l.activation) for l in b.actor]
    if sa != sb:
        raise ValueError("networks differ in actor architecture")


def parameter_jacobian(net: PolicyNetwork, s) -> np.ndarray:
    """d g(s) / d (actor weights), shape (output_dim, n_weights).

    Biases are left out: pruning never moves them, so their columns would
    only inflate the operator norm.
    """
    tape = nc.Tape()
    leaves = [tape.leaf(nc.value_of(l.weights)) for l in net.actor]
    layers = [Layer(w, nc.value_of(l.bias), l.activation) for w, l in zip(leaves, net.actor)]
    out = mlp_forward(layers, np.asarray(s, dtype=np.float64))
    n_out = out.value.size
    J = np.empty((n_out, sum(w.value.size for w in leaves)))
    for i in range(n_out):
        seed = np.zeros(n_out)
        seed[i] = 1.0
        grads = nc.backward(tape, out, seed)
        J[i] = np.concatenate([np.ravel(grads.get(w.index, np.zeros_like(w.value))) for w in leaves])
    return J


def _interpolate(net: PolicyNetwork, pruned: PolicyNetwork, t: float) -> PolicyNetwork:
    actor = [Layer(nc.value_of(lp.weights) + t * (nc.value_of(l.weights) - nc.value_of(lp.weights)),
                   nc.value_of(l.bias), l.activation)
             for l, lp in zip(net.actor, pruned.actor)]
    return PolicyNetwork(actor, net.critic, net.head)


def _operator_norm(J: np.ndarray) -> float:
    # exact SVD at desk scale, power iteration above
    if J.size <= EXACT_OPNORM_MAX_ENTRIES:
        return float(np.linalg.norm(J, 2))
    return nc.spectral_norm(J)


def rms_parameter_sensitivity(net: PolicyNetwork, states) -> float:
    """(mean_s ||J_phi g_phi(s)||_op^2)^(1/2)."""
    sq = [_operator_norm(parameter_jacobian(net, s)) ** 2 for s in states]
    return math.sqrt(float(np.mean(sq)))


def path_sensitivity(net_theta: PolicyNetwork, net_pruned: PolicyNetwork, states,
                     quadrature_points: int = 8) -> float:
    """Trapezoid estimate of the integral over t in [0, 1] of the RMS
    parameter-Jacobian norm along phi(t) = theta' + t (theta - theta')."""
    _check_same_arch(net_theta, net_pruned)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("need at least one state")
    if quadrature_points < 2:
        raise ValueError("quadrature_points must be >= 2")
    ts = np.linspace(0.0, 1.0, quadrature_points)
    vals = np.array([rms_parameter_sensitivity(_interpolate(net_theta, net_pruned, t), states) for t in ts])
    h = 1.0 / (quadrature_points - 1)
    return float(h * (vals.sum() - 0.5 * (vals[0] + vals[-1])))


def three_term_report(clean_regret: float, net_theta: PolicyNetwork, net_pruned: PolicyNetwork, states,
                      constants: MdpConstants, *, beta_smoothness: float = 0.0, quadrature_points: int = 8,
                      categorical_constant: float = C_VERIFIED_CATEGORICAL) -> CertReport:
    """Attacked-regret bound for the pruned policy split into clean regret,
    pruning loss and robustness gap."""
    _check_same_arch(net_theta, net_pruned)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = alpha(constants)
    c = policy_constant(net_pruned, categorical_constant)
    eps = constants.l2_epsilon(net_pruned.input_dim)
    lip = surrogate_lipschitz(net_pruned)
    delta = float(np.linalg.norm(_weight_vector(net_theta) - _weight_vector(net_pruned)))
    l_par = path_sensitivity(net_theta, net_pruned, states, quadrature_points) if delta > 0 else 0.0
    term2 = a * c * l_par * delta
    term3 = a * c * lip * eps
    local = [local_bound(net_pruned, s, constants, beta_smoothness, categorical_constant) for s in states]
    notes = []
    if constants.norm_p != 2:
        notes.append(f"l-inf budget {constants.epsilon} certified as l2 radius sqrt(D)*eps = {eps}")
    if beta_smoothness == 0 and any(l.activation == "tanh" for l in net_pruned.actor):
        notes.append("beta_smoothness=0 with tanh layers: local bounds are first-order only")
    return CertReport(
        surrogate_lipschitz=lip, alpha=a, c=c, epsilon_l2=eps, global_bound=a * c * lip * eps,
        local_bounds=local, beta_smoothness=beta_smoothness, path_sensitivity=l_par,
        delta_theta_norm=delta, three_term=(float(clean_regret), term2, term3), notes=notes,
    )


def certify(net: PolicyNetwork, constants: MdpConstants, states=None, *, beta_smoothness: float = 0.0,
            categorical_constant: float = C_VERIFIED_CATEGORICAL) -> CertReport:
    """Report for a single network (no pruning comparison)."""
    states = np.zeros((0, net.input_dim)) if states is None else states
    return three_term_report(0.0, net, net, states, constants, beta_smoothness=beta_smoothness,
                             categorical_constant=categorical_constant)


def empirical_F(net: PolicyNetwork, states, perturbed_states, constants: MdpConstants) -> EmpiricalRobustness:
    """Mean attack-achieved TV over visited states.

    The attack only approximates the inner maximum, so F-hat is a lower
    bound on the true expected worst-case TV.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    perturbed = np.atleast_2d(np.asarray(perturbed_states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("empirical_F needs at least one state")
    tv = np.clip(tv_exact(net.distribution(states), net.distribution(perturbed)), 0.0, 1.0)
    f_hat = float(np.mean(tv))
    return EmpiricalRobustness(f_hat, alpha(constants) * f_hat, [float(x) for x in tv])
