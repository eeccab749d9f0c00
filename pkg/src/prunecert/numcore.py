"""Dense float64 arithmetic with a reverse-mode tape, matrix norms and Jacobians.

Every op accepts either plain numpy arrays or :class:`Tensor` values. When no
argument is a tensor the op is evaluated eagerly with numpy and nothing is
recorded, so the same forward code serves fast rollouts and differentiation.
"""
from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed numeric input."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


# ---------------------------------------------------------------------------
# matrices and norms
# ---------------------------------------------------------------------------

def as_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("matrix has non-finite entries")
    return W


def frobenius_norm(W) -> float:
    W = as_matrix(W)
    return float(np.sqrt(np.sum(W * W)))


def one_norm(W) -> float:
    """Maximum absolute column sum."""
    W = as_matrix(W)
    if W.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(W), axis=0)))


def inf_norm(W) -> float:
    """Maximum absolute row sum."""
    W = as_matrix(W)
    if W.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(W), axis=1)))


def _power_iterate(W: np.ndarray, v: np.ndarray, tol: float, max_iters: int):
    sigma = 0.0
    for it in range(1, max_iters + 1):
        u = W @ v
        w = W.T @ u
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return float(np.linalg.norm(u)), True, it
        v = w / norm_w
        new_sigma = float(np.sqrt(norm_w))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma, True, it
        sigma = new_sigma
    return sigma, False, max_iters


def power_iteration(W, tol: float = 1e-10, max_iters: int = 10_000) -> tuple[float, bool]:
    """Largest singular value of ``W`` and whether the iteration converged.

    Starts from the normalized all-ones vector. If that start is (nearly)
    orthogonal to the top singular direction the estimate falls below the
    largest column norm, which is itself a lower bound on sigma_max; in that
    case a second run starts from the basis vector of that column.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    W = as_matrix(W)
    if W.size == 0 or not np.any(W):
        return 0.0, True
    if W.shape[1] > W.shape[0]:
        W = W.T
    n = W.shape[1]
    v0 = np.full(n, 1.0 / np.sqrt(n))
    sigma, converged, _ = _power_iterate(W, v0, tol, max_iters)
    col_norms = np.sqrt(np.sum(W * W, axis=0))
    j = int(np.argmax(col_norms))
    if sigma < col_norms[j] * (1.0 - 1e-6):
        e = np.zeros(n)
        e[j] = 1.0
        sigma2, converged2, _ = _power_iterate(W, e, tol, max_iters)
        if sigma2 > sigma:
            sigma, converged = sigma2, converged2
    return sigma, converged


def spectral_norm(W, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    sigma, converged = power_iteration(W, tol, max_iters)
    if not converged:
        warnings.warn(f"spectral_norm did not converge in {max_iters} iterations", RuntimeWarning)
    return sigma


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered record of primitive ops. Single use, single thread."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(np.array(value, dtype=np.float64), self, (), name=name)
        return t

    def _record(self, value, parents) -> "Tensor":
        return Tensor(value, self, parents)


class Tensor:
    """Array value on a tape. ``parents`` holds (tensor, vjp) pairs."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators
    __slots__ = ("value", "tape", "parents", "index", "name")

    def __init__(self, value: np.ndarray, tape: Tape, parents, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _binary(a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g: _unbroadcast(vjp_a(g, av, bv, out), av.shape)))
    if isinstance(b, Tensor):
        parents.append((b, lambda g: _unbroadcast(vjp_b(g, av, bv, out), bv.shape)))
    return tape._record(out, parents)


def _unary(x, fwd, vjp):
    if not isinstance(x, Tensor):
        return fwd(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = fwd(xv)
    return x.tape._record(out, [(x, lambda g: vjp(g, xv, out))])


def add(a, b):
    return _binary(a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    return _binary(a, b, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b))


def minimum(a, b):
    # ties send the gradient to the first argument
    return _binary(a, b, np.minimum,
                   lambda g, a, b, o: g * (a <= b),
                   lambda g, a, b, o: g * (a > b))


def maximum(a, b):
    return _binary(a, b, np.maximum,
                   lambda g, a, b, o: g * (a >= b),
                   lambda g, a, b, o: g * (a < b))


def _matmul_vjp_a(g, a, b, o):
    if b.ndim == 1:
        return np.multiply.outer(g, b) if a.ndim == 2 else g * b
    if a.ndim == 1:
        return g @ b.T
    return g @ b.T


def _matmul_vjp_b(g, a, b, o):
    if a.ndim == 1:
        return np.multiply.outer(a, g) if b.ndim == 2 else g * a
    if b.ndim == 1:
        return a.T @ g
    return a.T @ g


def matmul(a, b):
    return _binary(a, b, np.matmul, _matmul_vjp_a, _matmul_vjp_b)


def power(x, p: float):
    return _unary(x, lambda v: v ** p, lambda g, v, o: g * p * v ** (p - 1))


def square(x):
    return _unary(x, lambda v: v * v, lambda g, v, o: 2.0 * g * v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v)


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def relu(x):
    # subgradient at 0 is 0
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def identity(x):
    return x


def abs_(x):
    return _unary(x, np.abs, lambda g, v, o: g * np.sign(v))


def clip(x, lo, hi):
    """Clamp to constant bounds; gradient passes only strictly inside."""
    lo_v, hi_v = value_of(lo), value_of(hi)
    return _unary(x, lambda v: np.clip(v, lo_v, hi_v),
                  lambda g, v, o: g * ((v > lo_v) & (v < hi_v)))


def transpose(x):
    return _unary(x, lambda v: v.T, lambda g, v, o: g.T)


def reshape(x, shape):
    return _unary(x, lambda v: v.reshape(shape), lambda g, v, o: g.reshape(v.shape))


def getitem(x, idx):
    def vjp(g, v, o):
        out = np.zeros_like(v)
        np.add.at(out, idx, g)
        return out
    return _unary(x, lambda v: v[idx], vjp)


def _expand(g, v, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, v.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, v.shape)


def sum_(x, axis=None, keepdims=False):
    return _unary(x, lambda v: np.sum(v, axis=axis, keepdims=keepdims),
                  lambda g, v, o: _expand(g, v, axis, keepdims).copy())


def mean(x, axis=None, keepdims=False):
    def vjp(g, v, o):
        n = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
        return _expand(g, v, axis, keepdims) / n
    return _unary(x, lambda v: np.mean(v, axis=axis, keepdims=keepdims), vjp)


def log_softmax(x, axis: int = -1):
    def fwd(v):
        z = v - np.max(v, axis=axis, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g, v, o):
        return g - np.exp(o) * np.sum(g, axis=axis, keepdims=True)
    return _unary(x, fwd, vjp)


def softmax(x, axis: int = -1):
    return exp(log_softmax(x, axis))


def take_along_last(x, idx):
    """``x[..., idx]`` picking one entry per leading position."""
    idx = np.asarray(idx, dtype=np.int64)

    def fwd(v):
        return np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def vjp(g, v, o):
        out = np.zeros_like(v)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return out
    return _unary(x, fwd, vjp)


def concat(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = []
    for k, x in enumerate(xs):
        if isinstance(x, Tensor):
            parents.append((x, lambda g, k=k: np.split(g, sizes, axis=axis)[k]))
    return tape._record(out, parents)


def detach(x):
    return value_of(x).copy()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor, seed) -> dict[int, np.ndarray]:
    """Vector-Jacobian product from ``output`` with cotangent ``seed``.

    Returns accumulated cotangents keyed by node index.
    """
    if output.tape is not tape:
        raise ContractError("output does not belong to this tape")
    grads: dict[int, np.ndarray] = {output.index: np.asarray(seed, dtype=np.float64)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.get(node.index)
        if g is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(parent.index)
            grads[parent.index] = contrib if prev is None else prev + contrib
    return grads


def grad(tape: Tape, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Exact gradient of a scalar ``output`` with respect to each of ``wrt``."""
    if not isinstance(output, Tensor) or output.value.size != 1:
        raise ContractError("grad requires a scalar tensor output")
    grads = backward(tape, output, np.ones_like(output.value))
    return [grads.get(w.index, np.zeros_like(w.value)).reshape(w.value.shape) for w in wrt]


def input_jacobian(forward: Callable, s) -> np.ndarray:
    """Jacobian ``J[i, j] = d forward(s)_i / d s_j`` by one backward pass per row."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInputError("state must be a vector")
    tape = Tape()
    x = tape.leaf(s, "s")
    out = forward(x)
    if not isinstance(out, Tensor):
        return np.zeros((np.size(out), s.size))
    if out.value.ndim != 1:
        raise InvalidInputError(f"forward must return a vector, got shape {out.value.shape}")
    J = np.empty((out.value.size, s.size))
    for i in range(out.value.size):
        seed = np.zeros_like(out.value)
        seed[i] = 1.0
        J[i] = backward(tape, out, seed).get(x.index, np.zeros_like(s))
    return J
