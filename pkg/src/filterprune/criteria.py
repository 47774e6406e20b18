"""Filter scoring (L1 norm, FPGM aggregate distance) and per-layer selection.

Both criteria produce nonnegative float64 scores where *lower* means
"prune first". Selection removes ``floor(n * theta)`` filters, breaking
ties by the lower filter index.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_store import FilterBank


class Criterion(str, enum.Enum):
    L1 = "l1"
    FPGM = "fpgm"

    @classmethod
    def parse(cls, value) -> "Criterion":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown criterion {value!r}; expected 'l1' or 'fpgm'") from None

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ScoreVector:
    layer_name: str
    criterion: Criterion
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or not np.isfinite(s).all() or (s < 0).any():
            raise ValueError("scores must be a 1-D array of finite nonnegative values")

    def to_json(self):
        return {
            "layer": self.layer_name,
            "criterion": self.criterion.value,
            "scores": [float(v) for v in self.scores],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["layer"], Criterion.parse(obj["criterion"]), np.asarray(obj["scores"], dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, ScoreVector):
            return NotImplemented
        return (
            self.layer_name == other.layer_name
            and self.criterion == other.criterion
            and np.array_equal(self.scores, other.scores)
        )


@dataclass(frozen=True)
class Selection:
    layer_name: str
    pruned_indices: tuple[int, ...]
    kept_indices: tuple[int, ...]
    theta: float

    @property
    def n(self) -> int:
        return len(self.pruned_indices) + len(self.kept_indices)

    def to_json(self):
        return {
            "layer": self.layer_name,
            "theta": float(self.theta),
            "pruned": list(self.pruned_indices),
            "kept": list(self.kept_indices),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["layer"], tuple(obj["pruned"]), tuple(obj["kept"]), float(obj["theta"]))


def check_theta(theta) -> float:
    theta = float(theta)
    if not 0.0 <= theta < 1.0:
        raise ValueError(f"theta must be in [0,1), got {theta}")
    return theta


def prune_count(n: int, theta: float) -> int:
    """Number of filters removed from an ``n``-filter layer at rate ``theta``."""
    return math.floor(n * check_theta(theta))


def l1_scores(bank: FilterBank) -> ScoreVector:
    return ScoreVector(bank.layer_name, Criterion.L1, kernels.l1_scores(bank.filters))


def fpgm_scores(bank: FilterBank) -> ScoreVector:
    """Sum of Euclidean distances from each filter to every filter in the layer.

    This is the cheap stand-in for distance to the geometric median: the
    filters with the smallest totals are the most replaceable ones.
    """
    return ScoreVector(bank.layer_name, Criterion.FPGM, kernels.fpgm_scores(bank.filters))


def score(bank: FilterBank, criterion) -> ScoreVector:
    criterion = Criterion.parse(criterion)
    if criterion is Criterion.L1:
        return l1_scores(bank)
    return fpgm_scores(bank)


def select(scores: ScoreVector, theta: float) -> Selection:
    n = len(scores.scores)
    m = prune_count(n, theta)
    # stable sort keeps the lower index first among equal scores
    order = np.argsort(scores.scores, kind="stable")
    pruned = sorted(int(i) for i in order[:m])
    kept = sorted(int(i) for i in order[m:])
    return Selection(scores.layer_name, tuple(pruned), tuple(kept), float(theta))


class ConvergenceError(RuntimeError):
    pass


def aggregate_distance(points: np.ndarray, x: np.ndarray) -> float:
    return float(np.sqrt(((points - x) ** 2).sum(axis=1)).sum())


def geometric_median(bank: FilterBank, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Weiszfeld iteration for the point minimizing total distance to all filters.

    Diagnostic only; selection uses :func:`fpgm_scores`. Stops once the
    objective decreases by less than ``tol``. When an iterate lands on an
    input filter (within ``tol``), the Vardi-Zhang optimality test decides
    whether that filter is the median or a step off it is taken.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter >= 1")
    pts = np.asarray(bank.filters, dtype=np.float64)
    # data points repeated several times carry that multiplicity as weight
    uniq, counts = np.unique(pts, axis=0, return_counts=True)
    if len(uniq) == 1:
        return uniq[0].copy()
    weights = counts.astype(np.float64)

    x = (uniq * weights[:, None]).sum(axis=0) / weights.sum()
    obj = aggregate_distance(pts, x)
    for _ in range(max_iter):
        diff = uniq - x
        dist = np.sqrt((diff * diff).sum(axis=1))
        hit = dist <= tol
        if hit.any():
            idx = int(np.argmax(hit))
            others = ~hit
            w = weights[others] / dist[others]
            pull = (w[:, None] * (uniq[others] - x)).sum(axis=0)
            r = float(np.linalg.norm(pull))
            if r <= weights[idx]:
                return uniq[idx].copy()
            # step off the data point along the descent direction
            t_next = (w[:, None] * uniq[others]).sum(axis=0) / w.sum()
            gamma = max(0.0, 1.0 - weights[idx] / r)
            x_new = (1.0 - gamma) * uniq[idx] + gamma * t_next
        else:
            w = weights / dist
            x_new = (w[:, None] * uniq).sum(axis=0) / w.sum()
        new_obj = aggregate_distance(pts, x_new)
        x = x_new
        if obj - new_obj < tol:
            return x
        obj = new_obj
    raise ConvergenceError(
        f"geometric median did not converge within {max_iter} iterations (objective {obj})"
    )


def median_distance_scores(bank: FilterBank, tol: float = 1e-10, max_iter: int = 10_000) -> ScoreVector:
    """Distance from each filter to the explicitly computed geometric median.

    Alternative FPGM ranking kept for comparison against :func:`fpgm_scores`.
    """
    gm = geometric_median(bank, tol=tol, max_iter=max_iter)
    d = np.sqrt(((bank.filters - gm) ** 2).sum(axis=1))
    return ScoreVector(bank.layer_name, Criterion.FPGM, d)
