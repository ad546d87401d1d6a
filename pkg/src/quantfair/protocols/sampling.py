"""Splitting, prevalence-controlled sampling and label flipping."""

from __future__ import annotations

import math

import numpy as np

from ..data import LabeledSample
from ..errors import CellTooSmallError, EmptyGroupError, SampleError

WITH_REPLACEMENT = "with-replacement"


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def three_split_indices(sensitive, target, seed) -> list:
    """Row indices of three parts with the same joint (s, y) distribution.

    Each (s, y) cell is shuffled and dealt round-robin; the dealing position
    carries over from one cell to the next, so part sizes differ by at most 1.
    """
    s = np.asarray(sensitive)
    y = np.asarray(target)
    rng = _rng(seed)
    parts = [[], [], []]
    offset = 0
    for cs in (0, 1):
        for cy in (0, 1):
            members = np.flatnonzero((s == cs) & (y == cy))
            if members.size < 3:
                raise CellTooSmallError(f"cell (s={cs}, y={cy}) has {members.size} instances")
            members = rng.permutation(members)
            for k, idx in enumerate(members):
                parts[(offset + k) % 3].append(idx)
            offset = (offset + members.size) % 3
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


def stratified_three_split(dataset: LabeledSample, seed) -> tuple:
    idx = three_split_indices(dataset.labels("sensitive"), dataset.labels("target"), seed)
    return tuple(dataset.subset(i) for i in idx)


def _draw(pool: np.ndarray, count: int, rng, flags: list) -> np.ndarray:
    if count == 0:
        return pool[:0]
    if pool.size == 0:
        raise SampleError(f"need {count} instances from an empty pool", code="insufficient-pool")
    if pool.size < count:
        flags.append(WITH_REPLACEMENT)
        return rng.choice(pool, size=count, replace=True)
    return rng.choice(pool, size=count, replace=False)


def _two_pool_indices(is_one: np.ndarray, share: float, size: int, seed):
    if not 0.0 <= share <= 1.0:
        raise ValueError("target share must lie in [0, 1]")
    rng = _rng(seed)
    n_one = round_half_up(size * share)
    flags: list = []
    ones = _draw(np.flatnonzero(is_one), n_one, rng, flags)
    zeros = _draw(np.flatnonzero(~is_one), size - n_one, rng, flags)
    idx = rng.permutation(np.concatenate([ones, zeros]))
    return idx, tuple(dict.fromkeys(flags))


def sample_at_prevalence(source: LabeledSample, selector: str, target_prev: float, size: int,
                         seed, with_flags: bool = False):
    """Draw exactly ``round(size * target_prev)`` class-1 rows and the rest from class 0.

    Draws are without replacement; a pool too small for its count is
    sampled with replacement and flagged.
    """
    idx, flags = _two_pool_indices(source.labels(selector) == 1, target_prev, size, seed)
    out = source.subset(idx)
    return (out, flags) if with_flags else out


def sample_uniform(source: LabeledSample, size: int, seed, with_flags: bool = False):
    rng = _rng(seed)
    flags: list = []
    idx = _draw(np.arange(len(source)), size, rng, flags)
    out = source.subset(idx)
    return (out, tuple(flags)) if with_flags else out


def sample_joint_ys(source: LabeledSample, p_equal: float, size: int, seed,
                    with_flags: bool = False):
    """Draw a sample in which exactly ``round(size * p_equal)`` rows have y = s."""
    same = source.labels("target") == source.labels("sensitive")
    idx, flags = _two_pool_indices(same, p_equal, size, seed)
    out = source.subset(idx)
    return (out, flags) if with_flags else out


def _flip_towards(labels: np.ndarray, members: np.ndarray, wanted_value: int, wanted: int, rng):
    have = members[labels[members] == wanted_value]
    lack = members[labels[members] != wanted_value]
    if have.size < wanted:
        chosen = rng.choice(lack, size=wanted - have.size, replace=False)
        labels[chosen] = wanted_value
        return chosen.size
    if have.size > wanted:
        chosen = rng.choice(have, size=have.size - wanted, replace=False)
        labels[chosen] = 1 - wanted_value
        return chosen.size
    return 0


def flip_to_target(source: LabeledSample, p: float, size: int, seed, with_flags: bool = False):
    """Subsample ``size`` rows, then flip target labels so that
    ``Pr(y=1 | s=1) = Pr(y=0 | s=0) = p`` up to rounding.

    Only as many labels as needed are flipped, chosen uniformly in each group.
    """
    rng = _rng(seed)
    sub, flags = sample_uniform(source, size, rng, with_flags=True)
    s = sub.labels("sensitive")
    y = np.array(sub.labels("target"), dtype=np.int8)
    g1 = np.flatnonzero(s == 1)
    g0 = np.flatnonzero(s == 0)
    if g1.size == 0 or g0.size == 0:
        raise EmptyGroupError("both sensitive groups must appear in the subsample")
    flips = _flip_towards(y, g1, 1, round_half_up(p * g1.size), rng)
    flips += _flip_towards(y, g0, 0, round_half_up(p * g0.size), rng)
    out = sub.replace(target=y)
    return (out, flags, flips) if with_flags else out
