"""Elementwise mask pruning: criteria, ERK layer budgets and sparsity schedules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc

CRITERIA = ("magnitude", "magnitude_ste", "random", "saliency", "none")
SCHEDULES = ("linear", "cubic")


def scheduled_sparsity(schedule: str, t: float, T: float, burn_in_fraction: float, target: float) -> float:
    """Sparsity the schedule asks for at step ``t`` of ``T``.

    linear: ramps from 0 to ``target`` over the first ``target * T`` steps.
    cubic: 0 until ``burn_in_fraction * T``, then target * (1 - (1 - u)^3).
    """
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    if T == 0 or target == 0:
        return float(target) if T == 0 else 0.0
    frac = t / T
    if schedule == "linear":
        return target * min(1.0, frac / target)
    if schedule == "cubic":
        if frac <= burn_in_fraction:
            return 0.0
        u = (frac - burn_in_fraction) / (1.0 - burn_in_fraction)
        return target * (1.0 - (1.0 - u) ** 3)
    raise ValueError(f"unknown schedule {schedule!r}")


def erk_densities(layer_shapes: Sequence[tuple[int, int]], global_sparsity: float) -> np.ndarray:
    """Per-layer densities proportional to (rows + cols) / (rows * cols).

    Layers whose scaled density would exceed 1 are made dense and the
    remaining layers are rescaled until nothing is clipped.
    """
    if not 0.0 <= global_sparsity < 1.0:
        raise ValueError("global_sparsity must lie in [0, 1)")
    shapes = [tuple(int(x) for x in s) for s in layer_shapes]
    n = np.array([r * c for r, c in shapes], dtype=np.float64)
    raw = np.array([(r + c) / (r * c) for r, c in shapes])
    keep_total = (1.0 - global_sparsity) * n.sum()
    dense = np.zeros(len(shapes), dtype=bool)
    while True:
        free = ~dense
        budget = keep_total - n[dense].sum()
        if not free.any():
            if budget > 1e-9:
                raise ValueError("infeasible ERK target: every layer clipped dense")
            break
        scale = budget / np.dot(raw[free], n[free])
        dens = np.where(dense, 1.0, scale * raw)
        over = free & (dens > 1.0)
        if not over.any():
            break
        dense |= over
    return np.clip(dens, 0.0, 1.0)


def erk_layer_sparsities(layer_shapes, global_sparsity: float) -> np.ndarray:
    return 1.0 - erk_densities(layer_shapes, global_sparsity)


def _round_counts(real_counts: np.ndarray, total: int, caps: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, each <= its cap, nearest to real_counts."""
    counts = np.minimum(np.floor(real_counts + 1e-9), caps).astype(np.int64)
    remainder = total - int(counts.sum())
    frac = real_counts - counts
    order = np.lexsort((np.arange(len(counts)), -frac))
    while remainder > 0:
        moved = False
        for i in order:
            if remainder == 0:
                break
            if counts[i] < caps[i]:
                counts[i] += 1
                remainder -= 1
                moved = True
        if not moved:
            break
    return counts


def erk_keep_counts(layer_shapes, global_sparsity: float, caps=None) -> np.ndarray:
    """Integer kept-parameter counts per layer; total matches the target to
    within one parameter."""
    n = np.array([int(r) * int(c) for r, c in layer_shapes], dtype=np.int64)
    caps = n if caps is None else np.minimum(np.asarray(caps, dtype=np.int64), n)
    total = int(round((1.0 - global_sparsity) * n.sum()))
    total = min(total, int(caps.sum()))
    real = erk_densities(layer_shapes, global_sparsity) * n
    return _round_counts(real, total, caps)


def score(criterion: str, weights: np.ndarray, grads: np.ndarray | None = None,
          rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-entry keep score (higher survives)."""
    w = np.asarray(weights, dtype=np.float64)
    if criterion in ("magnitude", "magnitude_ste"):
        return np.abs(w)
    if criterion == "random":
        if rng is None:
            raise ValueError("random criterion needs an rng")
        return rng.random(w.shape)
    if criterion == "saliency":
        if grads is None:
            raise ValueError("saliency scoring needs a gradient snapshot")
        return np.abs(w * np.asarray(grads, dtype=np.float64))
    raise ValueError(f"criterion {criterion!r} has no score")


def top_k_mask(scores: np.ndarray, weights: np.ndarray, k: int, eligible: np.ndarray | None = None) -> np.ndarray:
    """Keep ``k`` entries ordered by (score desc, |w| desc, flat index asc)."""
    s = np.ravel(scores).astype(np.float64)
    if eligible is not None:
        s = np.where(np.ravel(eligible), s, -np.inf)
    idx = np.arange(s.size)
    order = np.lexsort((idx, -np.abs(np.ravel(weights)), -s))
    mask = np.zeros(s.size)
    mask[order[:k]] = 1.0
    return mask.reshape(np.shape(weights))


def apply_masks(params: list, masks: dict[int, np.ndarray]) -> list:
    """Copy of ``params`` with masked weight entries set to zero."""
    out = list(params)
    for i, m in masks.items():
        w = np.asarray(nc.value_of(out[i]))
        if w.shape != np.shape(m):
            raise ValueError(f"mask shape {np.shape(m)} does not match weights {w.shape}")
        out[i] = w * m
    return out


def backward_mask_rule(criterion: str) -> str:
    """'straight_through' lets gradients reach masked weights; 'zero' blocks them."""
    return "straight_through" if criterion == "magnitude_ste" else "zero"


def mask_gradients(grads: list, masks: dict[int, np.ndarray], criterion: str) -> list:
    if backward_mask_rule(criterion) == "straight_through":
        return grads
    out = list(grads)
    for i, m in masks.items():
        out[i] = out[i] * m
    return out


@dataclass
class PruneState:
    """Mask bookkeeping for one training run.

    ``masks`` maps a parameter index (as in ``net.parameters()``) to a 0/1
    array. ``update_interval`` counts optimizer (minibatch) steps.
    """

    criterion: str = "none"
    target_sparsity: float = 0.0
    schedule: str = "cubic"
    burn_in_fraction: float = 0.25
    update_interval: int = 1
    erk_enabled: bool = True
    prune_critic: bool = True
    rng_seed: int = 0
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        self._rng = np.random.default_rng(self.rng_seed)

    @property
    def active(self) -> bool:
        return self.criterion != "none" and self.target_sparsity > 0

    def init_masks(self, net) -> None:
        params = net.parameters()
        self.masks = {i: np.ones(np.shape(nc.value_of(params[i]))) for i in net.weight_indices(self.prune_critic)}

    def is_update_step(self, t: int, T: int) -> bool:
        return self.active and T > 0 and t / T > self.burn_in_fraction and t % self.update_interval == 0

    def realized_sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        if total == 0:
            return 0.0
        return 1.0 - sum(float(m.sum()) for m in self.masks.values()) / total


def prune_step(state: PruneState, net, t: int, T: int, grads: list | None = None) -> dict[int, np.ndarray]:
    """Recompute masks for step ``t``; returns (and stores) the new masks.

    Non-STE criteria only ever remove entries. magnitude_ste rescores the
    stored dense weights, so a masked entry can come back.
    """
    if not state.masks:
        state.init_masks(net)
    params = net.parameters()
    keys = sorted(state.masks)
    if not state.active:
        return state.masks
    sparsity = scheduled_sparsity(state.schedule, t, T, state.burn_in_fraction, state.target_sparsity)
    shapes = [np.shape(state.masks[i]) for i in keys]
    regrow = state.criterion == "magnitude_ste"
    current = np.array([int(state.masks[i].sum()) for i in keys], dtype=np.int64)
    sizes = np.array([int(np.prod(s)) for s in shapes], dtype=np.int64)
    caps = sizes if regrow else current
    if state.erk_enabled:
        counts = erk_keep_counts(shapes, sparsity, caps)
    else:
        real = (1.0 - sparsity) * sizes
        total = min(int(round((1.0 - sparsity) * sizes.sum())), int(caps.sum()))
        counts = _round_counts(real, total, caps)
    new_masks = {}
    for i, k in zip(keys, counts):
        w = np.asarray(nc.value_of(params[i]))
        g = None if grads is None else grads[i]
        s = score(state.criterion, w, g, state._rng)
        eligible = None if regrow else state.masks[i] > 0
        new_masks[i] = top_k_mask(s, w, int(k), eligible)
    state.masks = new_masks
    return new_masks
