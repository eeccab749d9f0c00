"""Small deterministic environments with batched numpy dynamics.

``step`` is a pure function of (state, action); randomness only enters
through ``reset``. Every method accepts a single state or a leading batch
axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class Env:
    name: str
    state_dim: int
    obs_dim: int
    horizon: int
    r_max: float
    action_dim: int | None = None  # continuous envs
    num_actions: int | None = None  # discrete envs
    action_low: float = -1.0
    action_high: float = 1.0

    @property
    def continuous(self) -> bool:
        return self.num_actions is None

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        states = self._reset(rng, 1 if n is None else n)
        return states[0] if n is None else states

    def step(self, state, action) -> Transition:
        state = np.asarray(state, dtype=np.float64)
        single = state.ndim == 1
        S = np.atleast_2d(state)
        A = self._check_action(action, S.shape[0])
        S2, R, D = self._step(S, A)
        if single:
            return Transition(state, A[0], R[0], S2[0], D[0])
        return Transition(S, A, R, S2, D)

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64).copy()

    def _check_action(self, action, n):
        if self.continuous:
            A = np.asarray(action, dtype=np.float64).reshape(n, -1)
            if A.shape[1] != self.action_dim:
                raise ValueError(f"action dim {A.shape[1]} != {self.action_dim}")
            return np.clip(A, self.action_low, self.action_high)
        A = np.asarray(action).reshape(n)
        if np.any(A < 0) or np.any(A >= self.num_actions) or not np.all(A == np.round(A)):
            raise ValueError(f"discrete action outside [0, {self.num_actions})")
        return A.astype(np.int64)


class PointMass(Env):
    """2-D point mass driven toward the origin; state (x, y, vx, vy).

    Semi-implicit Euler: velocity is updated first, then position uses the
    new velocity.
    """

    name = "pointmass"

    def __init__(self, dt: float = 0.05, horizon: int = 200, r_max: float = 10.0,
                 goal=(0.0, 0.0), init_range: float = 1.0):
        self.dt, self.horizon, self.r_max = dt, horizon, r_max
        self.goal = np.asarray(goal, dtype=np.float64)
        self.init_range = init_range
        self.state_dim = self.obs_dim = 4
        self.action_dim = 2

    def _reset(self, rng, n):
        pos = rng.uniform(-self.init_range, self.init_range, size=(n, 2)) + self.goal
        return np.concatenate([pos, np.zeros((n, 2))], axis=1)

    def _step(self, S, A):
        vel = S[:, 2:] + self.dt * A
        pos = S[:, :2] + self.dt * vel
        dist = np.linalg.norm(S[:, :2] - self.goal, axis=1)
        r = -(dist + 0.01 * np.sum(A * A, axis=1))
        r = np.clip(r, -self.r_max, 0.0)
        return np.concatenate([pos, vel], axis=1), r, np.zeros(len(S), dtype=bool)

    def scripted_action(self, state) -> np.ndarray:
        """Saturated PD controller toward the goal."""
        S = np.atleast_2d(state)
        a = -4.0 * (S[:, :2] - self.goal) - 3.0 * S[:, 2:]
        a = np.clip(a, -1.0, 1.0)
        return a[0] if np.ndim(state) == 1 else a


class Pendulum(Env):
    """Torque-limited pendulum; state (theta, theta_dot), observation
    (cos theta, sin theta, theta_dot)."""

    name = "pendulum"

    def __init__(self, dt: float = 0.05, horizon: int = 200, r_max: float = 10.0,
                 max_speed: float = 8.0, max_torque: float = 2.0, g: float = 10.0):
        self.dt, self.horizon, self.r_max = dt, horizon, r_max
        self.max_speed, self.g = max_speed, g
        self.action_low, self.action_high = -max_torque, max_torque
        self.state_dim, self.obs_dim = 2, 3
        self.action_dim = 1

    def _reset(self, rng, n):
        return np.stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.0, 1.0, n)], axis=1)

    def _step(self, S, A):
        th, thdot = S[:, 0], S[:, 1]
        u = A[:, 0]
        angle = (th + np.pi) % (2 * np.pi) - np.pi
        r = -(angle ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        r = np.clip(r, -self.r_max, 0.0)
        thdot = np.clip(thdot + (3.0 * self.g / 2.0 * np.sin(th) + 3.0 * u) * self.dt,
                        -self.max_speed, self.max_speed)
        th = th + thdot * self.dt
        return np.stack([th, thdot], axis=1), r, np.zeros(len(S), dtype=bool)

    def observe(self, state):
        S = np.asarray(state, dtype=np.float64)
        return np.stack([np.cos(S[..., 0]), np.sin(S[..., 0]), S[..., 1]], axis=-1)


BLOCKS = ("wall", "floor", "goal", "lava", "tree", "agent")
WALL, FLOOR, GOAL, LAVA, TREE, AGENT = range(len(BLOCKS))
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])  # up, down, left, right, no-op


class GridWorld(Env):
    """N x N tile world observed as one one-hot block vector per tile.

    The static layout (walls, lava, trees) is fixed by ``layout_seed``.
    State is (agent_row, agent_col, goal_row, goal_col). Walls and trees
    block movement; lava ends the episode with reward -1.
    """

    name = "gridworld"

    def __init__(self, size: int = 5, horizon: int = 50, layout_seed: int = 0,
                 n_walls: int = 2, n_lava: int = 1, n_trees: int = 1, step_cost: float = 0.01):
        self.size, self.horizon = size, horizon
        self.r_max = 1.0
        self.step_cost = step_cost
        self.num_blocks = len(BLOCKS)
        self.num_actions = len(MOVES)
        self.state_dim = 4
        self.obs_dim = size * size * self.num_blocks
        rng = np.random.default_rng(layout_seed)
        cells = rng.permutation(size * size)
        self.layout = np.full((size, size), FLOOR, dtype=np.int64)
        k = 0
        for block, count in ((WALL, n_walls), (LAVA, n_lava), (TREE, n_trees)):
            for c in cells[k:k + count]:
                self.layout[divmod(int(c), size)] = block
            k += count
        self.free_cells = np.array([divmod(int(c), size) for c in cells[k:]])
        if len(self.free_cells) < 2:
            raise ValueError("grid too small for its obstacles")

    @property
    def num_tiles(self) -> int:
        return self.size * self.size

    def _reset(self, rng, n):
        out = np.empty((n, 4))
        for i in range(n):
            a, g = rng.choice(len(self.free_cells), size=2, replace=False)
            out[i, :2], out[i, 2:] = self.free_cells[a], self.free_cells[g]
        return out

    def _step(self, S, A):
        pos = S[:, :2].astype(np.int64)
        goal = S[:, 2:].astype(np.int64)
        tgt = np.clip(pos + MOVES[A], 0, self.size - 1)
        block = self.layout[tgt[:, 0], tgt[:, 1]]
        blocked = (block == WALL) | (block == TREE)
        pos = np.where(blocked[:, None], pos, tgt)
        at_goal = np.all(pos == goal, axis=1)
        in_lava = self.layout[pos[:, 0], pos[:, 1]] == LAVA
        r = np.where(at_goal, 1.0, np.where(in_lava, -1.0, -self.step_cost))
        done = at_goal | in_lava
        return np.concatenate([pos, goal], axis=1).astype(np.float64), r, done

    def tiles(self, state) -> np.ndarray:
        """Block id per tile, shape (..., N*N)."""
        S = np.atleast_2d(np.asarray(state)).astype(np.int64)
        grid = np.broadcast_to(self.layout.ravel(), (len(S), self.num_tiles)).copy()
        rows = np.arange(len(S))
        grid[rows, S[:, 2] * self.size + S[:, 3]] = GOAL
        grid[rows, S[:, 0] * self.size + S[:, 1]] = AGENT
        return grid[0] if np.ndim(state) == 1 else grid

    def observe(self, state) -> np.ndarray:
        ids = self.tiles(state)
        onehot = np.eye(self.num_blocks)[ids]
        return onehot.reshape(onehot.shape[:-2] + (-1,))


def tile_one_hot_valid(obs, num_blocks: int) -> bool:
    x = np.asarray(obs).reshape(-1, num_blocks)
    return bool(np.all((x == 0) | (x == 1)) and np.all(x.sum(axis=1) == 1))


ENVS = {"pointmass": PointMass, "pendulum": Pendulum, "gridworld": GridWorld}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)


def default_epsilon(env: Env) -> float:
    return {"pointmass": 0.075, "pendulum": 0.05}.get(env.name, 1.0)
