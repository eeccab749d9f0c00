"""Brute-force reference computations used to validate the library.

Nothing here reuses the code under test beyond plain numpy/scipy; the
``self_check`` suite backs ``certify --self-check``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str
    tolerance: float


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        gf[i] = (float(f((flat + e).reshape(x.shape))) - float(f((flat - e).reshape(x.shape)))) / (2.0 * h)
    return g


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-12,
                    max_iters: int = 100_000, policy: np.ndarray | None = None) -> np.ndarray:
    """Q-function of a finite MDP by fixed-point iteration.

    P[s, a, s'] transition probabilities, R[s, a] rewards. With ``policy``
    (pi[s, a]) the Bellman expectation operator is iterated instead of the
    optimality operator.
    """
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    Q = np.zeros_like(R)
    for _ in range(max_iters):
        V = Q.max(axis=1) if policy is None else np.sum(policy * Q, axis=1)
        Q_new = R + gamma * P @ V
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    return Q


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(200)


def gaussian_tv_1d(d):
    """TV between N(0, 1) and N(d, 1) by quadrature of |p - q| / 2.

    The densities cross once, at d / 2, so each side is integrated with a
    200-node Gauss-Legendre rule over 12 standard deviations. Accepts an
    array of gaps.
    """
    d = np.abs(np.asarray(d, dtype=np.float64))
    mid = d / 2.0
    total = np.zeros_like(d)
    for lo, hi in ((mid - 12.0 - d, mid), (mid, mid + 12.0 + d)):
        half = (hi - lo) / 2.0
        x = (lo + hi)[..., None] / 2.0 + half[..., None] * _GL_NODES
        f = np.abs(np.exp(-0.5 * x ** 2) - np.exp(-0.5 * (x - d[..., None]) ** 2)) / math.sqrt(2.0 * math.pi)
        total = total + half * (f @ _GL_WEIGHTS)
    out = 0.5 * total
    return float(out) if out.ndim == 0 else out


def mc_tv(p: dict, q: dict, n: int = 100_000, rng: np.random.Generator | None = None) -> OracleResult:
    """TV between two distributions given as plain parameter dicts.

    {"probs": [...]} -> exact half l1 distance. {"mean": [...], "std": [...]}
    with equal stds -> quadrature along the whitened mean gap; unequal stds
    -> Monte Carlo with a 1.96 SEM tolerance.
    """
    if "probs" in p:
        a, b = np.asarray(p["probs"], float), np.asarray(q["probs"], float)
        return OracleResult(float(0.5 * np.abs(a - b).sum()), "exact-l1", 0.0)
    mp, sp = np.asarray(p["mean"], float), np.broadcast_to(np.asarray(p["std"], float), np.shape(p["mean"]))
    mq, sq = np.asarray(q["mean"], float), np.broadcast_to(np.asarray(q["std"], float), np.shape(q["mean"]))
    if np.array_equal(sp, sq):
        d = float(np.linalg.norm((mp - mq) / sp))
        return OracleResult(gaussian_tv_1d(d), "quadrature", 1e-12)
    rng = np.random.default_rng(0) if rng is None else rng
    x = mp + sp * rng.standard_normal((n, mp.size))
    lp = np.sum(stats.norm.logpdf(x, mp, sp), axis=1)
    lq = np.sum(stats.norm.logpdf(x, mq, sq), axis=1)
    w = np.maximum(0.0, 1.0 - np.exp(np.minimum(lq - lp, 50.0)))
    return OracleResult(float(w.mean()), "monte-carlo", float(1.96 * w.std(ddof=1) / math.sqrt(n)))


def gaussian_kl(mp, sp, mq, sq) -> float:
    mp, sp, mq, sq = (np.asarray(v, float) for v in (mp, sp, mq, sq))
    return float(np.sum(np.log(sq / sp) + (sp ** 2 + (mp - mq) ** 2) / (2 * sq ** 2) - 0.5))


def categorical_kl(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def linear_gaussian_max_kl(W, sigma: float, epsilon: float) -> OracleResult:
    """max over the l-inf box of ||W d||^2 / (2 sigma^2), by enumerating corners.

    The objective is convex in d, so the maximum sits at a vertex.
    """
    W = np.atleast_2d(np.asarray(W, float))
    D = W.shape[1]
    if D > 20:
        raise ValueError("corner enumeration limited to 20 dimensions")
    best = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=D):
        d = epsilon * np.asarray(signs)
        best = max(best, float(np.sum((W @ d) ** 2)) / (2.0 * sigma ** 2))
    return OracleResult(best, "corner-enumeration", 0.0)


def linear_value_corner(s, w, epsilon: float) -> np.ndarray:
    """argmin over the l-inf box of w^T s_hat."""
    return np.asarray(s, float) - epsilon * np.sign(np.asarray(w, float))


# ---------------------------------------------------------------------------
# self-check suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check(name: str, value: float, expected: float, tol: float) -> CheckResult:
    ok = abs(value - expected) <= tol
    return CheckResult(name, ok, f"got {value:.10g}, expected {expected:.10g} (tol {tol:g})")


def self_check(seed: int = 0) -> list[CheckResult]:
    """Oracles vs closed forms, then library quantities vs oracles."""
    from . import numcore as nc
    from .cert import MdpConstants, global_bound, surrogate_lipschitz
    from .policy import Categorical, Gaussian, Layer, PolicyNetwork, GaussianHead, kl, tv_exact

    rng = np.random.default_rng(seed)
    out = [
        _check("fd: d/dx x^2 at 3", finite_diff_grad(lambda x: float(x[0] ** 2), [3.0])[0], 6.0, 1e-6),
        _check("fd: tanh'(0)", finite_diff_grad(lambda x: float(np.tanh(x[0])), [0.0])[0], 1.0, 1e-6),
        _check("vi: single state r=1 gamma=0.5", value_iteration([[[1.0]]], [[1.0]], 0.5)[0, 0], 2.0, 1e-9),
        _check("tv: identical gaussians", mc_tv({"mean": [0.0], "std": [1.0]}, {"mean": [0.0], "std": [1.0]}).value, 0.0, 1e-12),
        _check("tv: gap 2 sigma", mc_tv({"mean": [0.0, 0.0], "std": 1.0}, {"mean": [2.0, 0.0], "std": 1.0}).value,
               2 * stats.norm.cdf(1.0) - 1, 1e-6),
    ]
    binary = [np.exp(1) / (1 + np.exp(1)), 1 / (1 + np.exp(1))]
    out.append(_check("tv: swapped binary logits", mc_tv({"probs": binary}, {"probs": binary[::-1]}).value,
                      0.46211715726000974, 1e-9))

    # library vs oracle
    W1, W2 = rng.normal(size=(6, 3)), rng.normal(size=(2, 6))
    x0 = rng.normal(size=3)

    def f_np(x):
        return float(np.sum(np.tanh(W2 @ np.tanh(W1 @ x)) ** 2))

    tape = nc.Tape()
    x = tape.leaf(x0)
    y = nc.sum_(nc.square(nc.tanh(nc.matmul(W2, nc.tanh(nc.matmul(W1, x))))))
    g = nc.grad(tape, y, [x])[0]
    fd = finite_diff_grad(f_np, x0)
    out.append(CheckResult("reverse-mode vs finite differences", bool(np.allclose(g, fd, rtol=1e-5, atol=1e-7)),
                           f"max abs diff {np.max(np.abs(g - fd)):.3g}"))

    lib = float(tv_exact(Gaussian(np.zeros(2), np.ones(2)), Gaussian(np.array([1.2, -0.7]), np.ones(2))))
    ora = mc_tv({"mean": [0, 0], "std": 1.0}, {"mean": [1.2, -0.7], "std": 1.0}).value
    out.append(_check("library gaussian TV vs quadrature", lib, ora, 1e-8))
    pk = rng.dirichlet(np.ones(4))
    qk = rng.dirichlet(np.ones(4))
    out.append(_check("library categorical KL vs oracle",
                      float(kl(Categorical.from_probs(pk), Categorical.from_probs(qk))), categorical_kl(pk, qk), 1e-10))

    violations = 0
    worst = math.inf
    for _ in range(200):
        sizes = [int(rng.integers(1, 5)) for _ in range(3)]
        layers = [Layer(rng.normal(size=(sizes[1], sizes[0])), rng.normal(size=sizes[1]), "tanh"),
                  Layer(rng.normal(size=(sizes[2], sizes[1])), rng.normal(size=sizes[2]), "identity")]
        sigma = float(rng.uniform(0.05, 1.0))
        net = PolicyNetwork(layers, [Layer(np.zeros((1, sizes[0])), np.zeros(1))], GaussianHead(np.full(sizes[2], sigma)))
        s = rng.normal(size=sizes[0])
        d = rng.normal(size=sizes[0])
        eps = float(rng.uniform(0.01, 0.5))
        d *= eps / np.linalg.norm(d)
        mu0, mu1 = net.actor_output(s), net.actor_output(s + d)
        tv = mc_tv({"mean": mu0, "std": sigma}, {"mean": mu1, "std": sigma}).value
        bound = global_bound(net, MdpConstants(0.0, 0.5, eps)) / (2.0 * 0.5)  # alpha = 1 at gamma 0, r_max 0.5
        worst = min(worst, bound - tv)
        violations += tv > bound + 1e-12
    out.append(CheckResult("global TV bound vs oracle TV", violations == 0,
                           f"{violations} violations over 200 nets, min slack {worst:.3g}"))
    L = surrogate_lipschitz([Layer(np.eye(3), np.zeros(3))])
    out.append(_check("surrogate Lipschitz of identity", L, 1.0, 1e-12))
    return out
