"""
Pareto dominance, hypervolume and the elitist archive.

All objective vectors are maximization-aligned tuples of floats.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .rng import make_rng

EXACT_MAX_DIM = 4
DEFAULT_MC_SAMPLES = 100_000
REFERENCE_EPS = 1e-6


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """
    True iff ``a`` is at least as good as ``b`` on every axis and strictly
    better on one.

    Examples
    --------
    >>> dominates((0.9, -10), (0.9, -12))
    True
    >>> dominates((0.9, -10), (0.8, -12)) or dominates((0.8, -12), (0.9, -10))
    False
    """
    if len(a) != len(b):
        raise ValueError(f"Objective vectors differ in length: {len(a)} vs {len(b)}")
    better = False
    for x, y in zip(a, b):
        if x < y:
            return False
        if x > y:
            better = True
    return better


def weakly_dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    if len(a) != len(b):
        raise ValueError(f"Objective vectors differ in length: {len(a)} vs {len(b)}")
    return all(x >= y for x, y in zip(a, b))


def nondominated_subset(points: Sequence[Sequence[float]]) -> List[int]:
    """
    Indices of the non-dominated points by brute-force pairwise scan.

    Of several identical points only the first is kept.
    """
    keep = []
    for i, p in enumerate(points):
        if any(dominates(q, p) for j, q in enumerate(points) if j != i):
            continue
        if any(tuple(points[j]) == tuple(p) for j in range(i)):
            continue
        keep.append(i)
    return keep


def reference_point(points: Iterable[Sequence[float]], eps: float = REFERENCE_EPS) -> Tuple[float, ...]:
    """Componentwise minimum minus ``eps``."""
    arr = np.asarray(list(points), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("Cannot build a reference point from no points")
    return tuple(float(v) for v in arr.min(axis=0) - eps)


def _check_front(front: Sequence[Sequence[float]], ref: Sequence[float]) -> np.ndarray:
    arr = np.asarray([tuple(p) for p in front], dtype=np.float64).reshape(len(front), -1) \
        if len(front) else np.zeros((0, len(ref)))
    if arr.shape[1] != len(ref):
        raise ValueError(f"Front dimension {arr.shape[1]} does not match reference dimension {len(ref)}")
    for p in arr:
        if not dominates(tuple(p), tuple(ref)):
            raise ValueError(f"Point {tuple(float(v) for v in p)} does not dominate the reference point")
    return arr


def _sweep(points: np.ndarray, ref: np.ndarray) -> float:
    """Exact volume by slicing along the last axis."""
    if len(points) == 0:
        return 0.0
    d = points.shape[1]
    if d == 1:
        return float(points[:, 0].max() - ref[0])
    if d == 2:
        order = np.argsort(-points[:, 0], kind="stable")
        volume, best_y = 0.0, ref[1]
        xs = points[order, 0]
        ys = points[order, 1]
        for k in range(len(order)):
            best_y = max(best_y, ys[k])
            next_x = xs[k + 1] if k + 1 < len(order) else ref[0]
            volume += (xs[k] - next_x) * (best_y - ref[1])
        return float(volume)
    order = np.argsort(-points[:, -1], kind="stable")
    points = points[order]
    volume = 0.0
    for k in range(len(points)):
        next_z = points[k + 1, -1] if k + 1 < len(points) else ref[-1]
        height = points[k, -1] - next_z
        if height > 0:
            volume += _sweep(points[:k + 1, :-1], ref[:-1]) * height
    return float(volume)


def hypervolume_mc(front: Sequence[Sequence[float]], ref: Sequence[float],
                   samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> float:
    """Monte-Carlo estimate: dominated fraction of the bounding box times its volume."""
    arr = _check_front(front, ref)
    if len(arr) == 0:
        return 0.0
    ref_arr = np.asarray(ref, dtype=np.float64)
    upper = arr.max(axis=0)
    box = float(np.prod(upper - ref_arr))
    rng = make_rng(seed, "hypervolume")
    hits = 0
    chunk = 20_000
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        draws = ref_arr + rng.random((n, arr.shape[1])) * (upper - ref_arr)
        covered = np.zeros(n, dtype=bool)
        for p in arr:
            covered |= np.all(draws <= p, axis=1)
        hits += int(covered.sum())
    return box * hits / samples


def hypervolume(front: Sequence[Sequence[float]], ref: Sequence[float],
                mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> float:
    """
    Volume of the union of boxes ``[ref, p]`` over the front.

    Exact for up to four objectives; Monte-Carlo with ``mc_samples`` draws
    above that.

    Raises
    ------
    ValueError
        If a point does not dominate ``ref``.

    Examples
    --------
    >>> hypervolume([(2, 1), (1, 2)], (0, 0))
    3.0
    """
    arr = _check_front(front, ref)
    if arr.shape[1] > EXACT_MAX_DIM:
        return hypervolume_mc(front, ref, samples=mc_samples, seed=seed)
    return _sweep(arr, np.asarray(ref, dtype=np.float64))


def hypervolume_contributions(points: Sequence[Sequence[float]], ref: Sequence[float],
                              mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> List[float]:
    """Exclusive contribution of each point: HV(all) - HV(all without it)."""
    points = [tuple(p) for p in points]
    if not points:
        return []
    total = hypervolume(points, ref, mc_samples, seed)
    out = []
    for i in range(len(points)):
        rest = points[:i] + points[i + 1:]
        out.append(max(total - hypervolume(rest, ref, mc_samples, seed), 0.0))
    return out


@dataclass
class ParetoArchive:
    """
    Mutually non-dominated members keyed by individual id.

    A candidate weakly dominated by a member is rejected; accepting a
    candidate evicts the members it dominates.
    """

    members: Dict[int, Tuple[float, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, member_id: int) -> bool:
        return member_id in self.members

    @property
    def ids(self) -> List[int]:
        return sorted(self.members)

    @property
    def points(self) -> List[Tuple[float, ...]]:
        return [self.members[i] for i in self.ids]

    def insert(self, member_id: int, objectives: Sequence[float]) -> bool:
        """Try to add a candidate; returns whether it entered."""
        candidate = tuple(float(v) for v in objectives)
        if any(not math.isfinite(v) for v in candidate):
            return False
        for point in self.members.values():
            if weakly_dominates(point, candidate):
                return False
        for other in [i for i, point in self.members.items() if dominates(candidate, point)]:
            del self.members[other]
        self.members[member_id] = candidate
        return True

    def hypervolume(self, ref: Sequence[float], mc_samples: int = DEFAULT_MC_SAMPLES) -> float:
        return hypervolume(self.points, ref, mc_samples) if self.members else 0.0

    def check(self) -> None:
        """Raise ``AssertionError`` if any member dominates another."""
        items = list(self.members.items())
        for i, a in items:
            for j, b in items:
                if i != j and dominates(a, b):
                    raise AssertionError(f"archive member {i} dominates member {j}")

    def to_dict(self) -> dict:
        return {"members": [{"id": i, "objectives": list(self.members[i])} for i in self.ids]}

    @classmethod
    def from_dict(cls, data: dict) -> "ParetoArchive":
        return cls({int(m["id"]): tuple(m["objectives"]) for m in data.get("members", [])})


def truncate_by_contribution(ids: Sequence[int], points: Sequence[Sequence[float]], size: int,
                             ref: Sequence[float], mc_samples: int = DEFAULT_MC_SAMPLES) -> List[int]:
    """
    Keep ``size`` ids with the largest hypervolume contributions.

    Ties (including every dominated point, which contributes nothing) go to
    the lower id. Returned ids are sorted.
    """
    if len(ids) <= size:
        return sorted(ids)
    contributions = hypervolume_contributions(points, ref, mc_samples)
    ranked = sorted(zip(ids, contributions), key=lambda t: (-t[1], t[0]))
    return sorted(i for i, _ in ranked[:size])
