"""Score-aware rehearsal: exemplar sampling, bounded memory, feature-score augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import FeatureClip
from .numerics import ShapeError, Tensor


@dataclass(frozen=True, eq=False)
class Exemplar:
    clip: FeatureClip
    score: float
    task: int

    def __post_init__(self):
        if self.score != self.clip.score:
            raise ValueError("exemplar score must equal its clip's score")

    @classmethod
    def of(cls, clip: FeatureClip) -> "Exemplar":
        return cls(clip, clip.score, clip.task_id)

    @property
    def key(self) -> tuple[int, int]:
        return self.clip.key


@dataclass(frozen=True)
class HelperSet:
    features: np.ndarray  # (K, D_f)
    scores: np.ndarray    # (K,)

    def __post_init__(self):
        if len(self.features) == 0 or len(self.features) != len(self.scores):
            raise ValueError("helper features and scores must be non-empty and equally long")


# --------------------------------------------------------------------------- #
# exemplar samplers; each returns indices into the input sequence


def _check_count(n: int, m: int) -> None:
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    if not 1 <= m <= n:
        raise ValueError(f"cannot take {m} exemplars from {n} items")


def group_bounds(n: int, m: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``m`` contiguous groups; earlier groups get the remainder."""
    base, extra = divmod(n, m)
    bounds, lo = [], 0
    for g in range(m):
        hi = lo + base + (1 if g < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def grouping_sample(scores: Sequence[float], m: int) -> list[int]:
    """Score-stratified selection.

    Items are ranked by score (stable for ties) and cut into ``m`` near-equal
    groups. The first item of each of the first ``m - 1`` groups is taken,
    plus the last item of the final group, so the lowest and highest scores
    are always kept.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_count(len(scores), m)
    order = np.argsort(scores, kind="stable")
    bounds = group_bounds(len(scores), m)
    picks = [int(order[lo]) for lo, _ in bounds[:-1]]
    picks.append(int(order[bounds[-1][1] - 1]))
    return picks


def random_sample(n: int, m: int, rng: np.random.Generator) -> list[int]:
    _check_count(n, m)
    return [int(i) for i in rng.choice(n, size=m, replace=False)]


def herding_sample(features: np.ndarray, m: int) -> list[int]:
    """Greedy mean matching: each step adds the item that brings the running
    exemplar mean closest to the full-set mean. Ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"herding needs (N, D) features, got {features.shape}")
    _check_count(len(features), m)
    target = features.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(target)
    available = np.ones(len(features), dtype=bool)
    for k in range(1, m + 1):
        dist = np.linalg.norm(target - (running + features) / k, axis=1)
        dist[~available] = np.inf
        best = int(np.argmin(dist))
        chosen.append(best)
        available[best] = False
        running += features[best]
    return chosen


# --------------------------------------------------------------------------- #
# memory


class ExemplarStore:
    """Bounded rehearsal memory; each task's list is kept sorted by score."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("memory capacity must be positive")
        self.capacity = capacity
        self.per_task: dict[int, list[Exemplar]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_task.values())

    @property
    def tasks(self) -> list[int]:
        return list(self.per_task)

    def all(self) -> list[Exemplar]:
        return [e for v in self.per_task.values() for e in v]

    def sorted_by_score(self) -> list[Exemplar]:
        return sorted(self.all(), key=lambda e: e.score)

    def set_task(self, task: int, exemplars: Sequence[Exemplar]) -> None:
        keys = [e.key for e in exemplars]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate exemplars for task {task}")
        if any(e.task != task for e in exemplars):
            raise ValueError(f"exemplar from another task filed under task {task}")
        self.per_task[task] = sorted(exemplars, key=lambda e: e.score)
        if len(self) > self.capacity:
            raise ValueError(f"memory holds {len(self)} > capacity {self.capacity}")


def rebalance_memory(
    store: ExemplarStore,
    task: int,
    train: Sequence[FeatureClip],
    capacity: int | None = None,
    select: Callable[[Sequence[FeatureClip], int], list[int]] | None = None,
) -> ExemplarStore:
    """Shrink stored tasks to ``floor(M / t)`` each and add the new task.

    Stored lists are shrunk with grouping sampling; ``select`` picks the new
    task's exemplars from its training set (grouping sampling by default).
    """
    capacity = store.capacity if capacity is None else capacity
    n_tasks = len(store.per_task) + (0 if task in store.per_task else 1)
    if capacity < n_tasks:
        raise ValueError(f"memory of {capacity} cannot hold {n_tasks} tasks")
    quota = capacity // n_tasks
    if select is None:
        select = lambda clips, m: grouping_sample([c.score for c in clips], m)  # noqa: E731
    store.capacity = capacity
    for old, exemplars in list(store.per_task.items()):
        if len(exemplars) > quota:
            keep = grouping_sample([e.score for e in exemplars], quota)
            store.per_task[old] = sorted((exemplars[i] for i in keep), key=lambda e: e.score)
    m = min(quota, len(train))
    picks = select(train, m)
    store.set_task(task, [Exemplar.of(train[i]) for i in picks])
    return store


# --------------------------------------------------------------------------- #
# helpers and augmentation


def select_helpers_random(n_items: int, k: int, rng: np.random.Generator,
                          exclude: int | None = None) -> list[int]:
    """K distinct indices from ``range(n_items)``, never ``exclude``."""
    pool = np.arange(n_items)
    if exclude is not None:
        pool = pool[pool != exclude]
    if k < 1 or len(pool) < k:
        raise ValueError(f"need {k} helpers but only {len(pool)} stored items are eligible")
    return [int(i) for i in rng.choice(pool, size=k, replace=False)]


def anchor_split(k: int, anchor: int, size: int) -> tuple[int, int]:
    """How many helpers come from below/above a 1-based ``anchor`` among ``size``."""
    if k < 1 or not 1 <= anchor <= size:
        raise ValueError(f"invalid anchor {anchor} for size {size} and k={k}")
    below, above = anchor - 1, size - anchor
    if below + above < k:
        raise ValueError(f"only {below + above} items around the anchor, need {k}")
    n_low = math.floor(k * below / (size - 1) + 0.5) if size > 1 else 0
    n_low = min(max(n_low, k - above), below)
    return n_low, k - n_low


def select_helpers_anchor(n_items: int, k: int, anchor: int, rng: np.random.Generator) -> list[int]:
    """Helpers around position ``anchor`` (1-based) of a score-sorted memory view.

    The low/high split follows the anchor's rank so that lower-score helpers
    are drawn in proportion to how many stored items score below it.
    """
    n_low, n_high = anchor_split(k, anchor, n_items)
    low = rng.choice(anchor - 1, size=n_low, replace=False) if n_low else np.array([], dtype=int)
    high = anchor + rng.choice(n_items - anchor, size=n_high, replace=False) if n_high else np.array([], dtype=int)
    return [int(i) for i in low] + [int(i) for i in high]


def fs_augment(feature, score, helpers: HelperSet, sigma: float,
               rng: np.random.Generator | None = None, eps: float | None = None,
               clip: float | None = None):
    """Move a feature and its score toward the helper mean by the same random step.

    One ``eps ~ N(0, sigma)`` scales both perturbations, which keeps any
    affine feature-to-score relation intact. Returns ``(feature, score, eps)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    feature = np.asarray(feature, dtype=np.float64)
    if helpers.features.shape[1:] != feature.shape:
        raise ShapeError("fs_augment", f"helper features {helpers.features.shape} vs feature {feature.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("need an rng or a fixed eps")
        eps = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    if clip is not None:
        eps = float(np.clip(eps, -clip, clip))
    delta_f = helpers.features.mean(axis=0) - feature
    delta_s = float(np.mean(helpers.scores)) - float(score)
    return feature + eps * delta_f, float(score) + eps * delta_s, eps


def difference_loss(aug_prev, cur_prev, aug_score, score, regressor) -> Tensor:
    """Squared error of the difference regressor on ``[aug_prev, cur_prev]``.

    Inputs may be single vectors or (B, D_f) batches; batches are averaged.
    """
    aug_prev, cur_prev = nx.as_tensor(aug_prev), nx.as_tensor(cur_prev)
    if aug_prev.shape != cur_prev.shape:
        raise ShapeError("difference_loss", f"latents {aug_prev.shape} and {cur_prev.shape} differ")
    single = aug_prev.ndim == 1
    if single:
        aug_prev = nx.reshape(aug_prev, (1,) + aug_prev.shape)
        cur_prev = nx.reshape(cur_prev, (1,) + cur_prev.shape)
    target = np.atleast_1d(np.asarray(aug_score, dtype=np.float64) - np.asarray(score, dtype=np.float64))
    pred = regressor(nx.concat([aug_prev, cur_prev], axis=-1))
    return nx.mse(pred, target)
