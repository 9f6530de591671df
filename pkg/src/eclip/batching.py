"""Batch composition (uniform / category hard negatives) and the batch-size schedule."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np

from .errors import CapacityError, ParameterError, RangeError

MAX_CATEGORY_DEPTH = 4
# floor() slack so that e.g. p = 2/3 lands on factor 4 despite cos() rounding
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class ScheduleConfig:
    B0: int
    Bmax: int
    total_steps: int

    def __post_init__(self):
        if self.B0 < 1:
            raise ParameterError("B0 must be >= 1")
        if self.Bmax < self.B0:
            raise ParameterError("Bmax must be >= B0")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")


def batch_size_factor(p: float) -> int:
    """``floor(2 / (1 + cos(pi p)))``: the inverse of a cosine-annealing curve."""
    denom = 1.0 + math.cos(math.pi * p)
    if denom <= 0.0:
        return 2**62
    return int(math.floor(2.0 / denom + _FLOOR_SLACK))


def batch_size_schedule(t: int, cfg: ScheduleConfig) -> int:
    """Batch size at step ``t``: ``B0 * factor(t/T)`` clamped to ``[B0, Bmax]``."""
    if not 0 <= t < cfg.total_steps:
        raise RangeError(f"step {t} outside [0, {cfg.total_steps})")
    b = cfg.B0 * batch_size_factor(t / cfg.total_steps)
    return int(min(max(b, cfg.B0), cfg.Bmax))


class CategoryIndex:
    """Maps product ids to category paths and category prefixes to members."""

    def __init__(self, ids: Sequence[Hashable], paths: Sequence[Sequence[str]]):
        if len(ids) != len(paths):
            raise ParameterError("ids and paths differ in length")
        self._path = {}
        self._members = defaultdict(list)
        for pid, path in zip(ids, paths):
            path = tuple(path)
            if len(path) > MAX_CATEGORY_DEPTH:
                raise ParameterError(f"{pid}: category path deeper than {MAX_CATEGORY_DEPTH} levels")
            if pid in self._path:
                raise ParameterError(f"duplicate product id {pid!r}")
            self._path[pid] = path
            for lvl in range(len(path) + 1):
                self._members[path[:lvl]].append(pid)
        self.max_depth = max((len(p) for p in self._path.values()), default=0)

    def __len__(self) -> int:
        return len(self._path)

    def path(self, pid) -> tuple:
        return self._path[pid]

    def members(self, prefix: Sequence[str]) -> list:
        return list(self._members.get(tuple(prefix), ()))


def compose_batch_uniform(dataset: Sequence[Hashable], n: int, rng: np.random.Generator) -> list:
    """``n`` distinct ids drawn uniformly without replacement."""
    if n > len(dataset):
        raise CapacityError(f"batch of {n} requested from {len(dataset)} items")
    idx = rng.choice(len(dataset), size=n, replace=False)
    return [dataset[i] for i in idx]


def compose_batch_category(
    dataset: Sequence[Hashable],
    tree: CategoryIndex,
    n: int,
    level: int,
    rng: np.random.Generator,
    with_info: bool = False,
):
    """Hard-negative batch: every member shares the anchor's category prefix of length ``level``.

    The anchor is drawn uniformly from ``dataset``. If its subtree holds fewer
    than ``n`` dataset items the batch is drawn uniformly instead. With
    ``with_info`` the return value is ``(ids, fell_back)``.
    """
    if len(tree) == 0 or len(dataset) == 0:
        raise CapacityError("empty category tree")
    if not 0 <= level <= tree.max_depth:
        raise ParameterError(f"level {level} outside [0, {tree.max_depth}]")
    anchor = dataset[int(rng.integers(len(dataset)))]
    prefix = tree.path(anchor)[:level]
    allowed = set(dataset)
    pool = [pid for pid in tree.members(prefix) if pid in allowed]
    if len(pool) >= n:
        ids = compose_batch_uniform(pool, n, rng)
        fell_back = False
    else:
        ids = compose_batch_uniform(dataset, n, rng)
        fell_back = True
    return (ids, fell_back) if with_info else ids


class BatchSampler:
    """Per-stream sampler implementing the negative-sampling activation policy.

    Category batches are off for the first ``warmup_fraction`` of training and
    afterwards used with probability ``neg_prob`` per batch.
    """

    def __init__(
        self,
        dataset: Sequence[Hashable],
        tree: Optional[CategoryIndex] = None,
        policy: str = "uniform",
        warmup_fraction: float = 0.1,
        neg_prob: float = 0.5,
        level: Optional[int] = None,
        seed: int = 0,
    ):
        if policy not in ("uniform", "category"):
            raise ParameterError(f"unknown sampling policy {policy!r}")
        if policy == "category" and tree is None:
            raise ParameterError("category sampling needs a CategoryIndex")
        self.dataset = list(dataset)
        self.tree = tree
        self.policy = policy
        self.warmup_fraction = warmup_fraction
        self.neg_prob = neg_prob
        self.level = level if level is not None else (max(tree.max_depth - 1, 0) if tree else 0)
        self.rng = np.random.default_rng(seed)

    def draw(self, t: int, total_steps: int, n: int) -> tuple[list, str]:
        if self.policy == "category" and t >= self.warmup_fraction * total_steps:
            if self.rng.random() < self.neg_prob:
                ids, fell_back = compose_batch_category(
                    self.dataset, self.tree, n, self.level, self.rng, with_info=True
                )
                return ids, "uniform-fallback" if fell_back else "category"
        return compose_batch_uniform(self.dataset, n, self.rng), "uniform"
