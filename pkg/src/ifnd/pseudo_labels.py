"""k-means pseudo labels, confidence scores and incremental acceptance."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .embedding import DEFAULT_TAU, as_array
from .errors import (
    EmptyClusterUnrecoverable,
    EpochOutOfRange,
    LevelMismatch,
    TooFewSamples,
)
from .losses import SINGLETON

KMEANS_RESTARTS = 3
KMEANS_MAX_ITERS = 100


@dataclass
class ClusterLevel:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    confidence: Optional[np.ndarray] = None
    inertia_history: list = field(default_factory=list)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = cdist(x, centers[:1], "sqeuclidean")[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        np.minimum(closest, cdist(x, centers[j:j + 1], "sqeuclidean")[:, 0], out=closest)
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int):
    """Return (centers, assignment, inertia, history) or None if an empty cluster cannot be repaired."""
    k = centers.shape[0]
    history = []
    assignment = None
    for _ in range(max_iters):
        d2 = cdist(x, centers, "sqeuclidean")
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed to the point farthest from its own centroid
            own = np.where(counts[new] > 1, d2[np.arange(len(new)), new], -1.0)
            far = int(own.argmax())
            if own[far] <= 0.0:
                return None
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            centers[j] = x[far]
            d2[:, j] = cdist(x, centers[j:j + 1], "sqeuclidean")[:, 0]
        history.append(float(d2[np.arange(len(new)), new].sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        for j in range(k):
            centers[j] = x[assignment == j].mean(axis=0)
    d2 = cdist(x, centers, "sqeuclidean")
    assignment = d2.argmin(axis=1)
    if np.bincount(assignment, minlength=k).min() == 0:
        return None
    inertia = float(d2[np.arange(len(assignment)), assignment].sum())
    history.append(inertia)
    return centers, assignment, inertia, history


def kmeans(features, k: int, seed=0, max_iters: int = KMEANS_MAX_ITERS,
           restarts: int = KMEANS_RESTARTS) -> ClusterLevel:
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-inertia restart.

    Assignment ties go to the lowest centroid index. An empty cluster is
    reseeded with the point farthest from its centroid; a restart where that
    is impossible (fewer distinct points than ``k``) is discarded.
    """
    x = as_array(features)
    n = x.shape[0]
    if k < 1 or n < k:
        raise TooFewSamples(f"k-means with k={k} needs at least {k} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        out = _lloyd(x, _plusplus(x, k, rng), max_iters)
        if out is not None and (best is None or out[2] < best[2]):
            best = out
    if best is None:
        raise EmptyClusterUnrecoverable(f"could not fill {k} clusters in {restarts} restarts")
    centers, assignment, inertia, history = best
    return ClusterLevel(k=k, centroids=centers, assignment=assignment, inertia=inertia,
                        inertia_history=history)


def confidence(features, level: ClusterLevel, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax weight of each sample's own centroid among all centroids.

    ``features`` should already be unit rows; centroids are renormalized here.
    """
    x = as_array(features)
    c = np.asarray(level.centroids, dtype=np.float64)
    if x.shape[0] != len(level.assignment) or x.shape[1] != c.shape[1]:
        raise LevelMismatch(
            f"features {x.shape} do not match level with {len(level.assignment)} samples, dim {c.shape[1]}"
        )
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    c = c / np.where(norms > 0, norms, 1.0)
    logits = x @ c.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w[np.arange(x.shape[0]), level.assignment] / w.sum(axis=1)


class Scheme(str, enum.Enum):
    CONSTANT = "constant"
    STEP = "step"
    LINEAR = "linear"


@dataclass(frozen=True)
class AcceptanceSchedule:
    scheme: Scheme = Scheme.LINEAR
    initial_rate: float = 0.0
    final_rate: float = 1.0
    total_epochs: int = 1
    step_epoch: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        for r in (self.initial_rate, self.final_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"acceptance rates must lie in [0, 1], got {r}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if self.scheme is Scheme.STEP and self.step_epoch is None:
            raise ValueError("step schedules need step_epoch")

    def describe(self) -> str:
        if self.scheme is Scheme.CONSTANT:
            return f"constant {self.final_rate:g}"
        if self.scheme is Scheme.STEP:
            return f"step {self.initial_rate:g}→{self.final_rate:g}@{self.step_epoch}"
        return f"linear {self.initial_rate:g}→{self.final_rate:g}"


def rate_at(schedule: AcceptanceSchedule, epoch: int) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.scheme is Scheme.CONSTANT:
        return schedule.final_rate
    if schedule.scheme is Scheme.STEP:
        return schedule.initial_rate if epoch < schedule.step_epoch else schedule.final_rate
    return epoch / schedule.total_epochs * (schedule.final_rate - schedule.initial_rate) + schedule.initial_rate


def accepted_count(rate: float, n: int) -> int:
    # the epsilon absorbs products like 0.7 * 10 == 7.000000000000001
    return min(n, max(0, math.ceil(rate * n - 1e-9)))


def accept_labels(level: ClusterLevel, rate: float, conf: Optional[np.ndarray] = None) -> np.ndarray:
    """Keep the cluster index of the ``ceil(rate * N)`` most confident samples, SINGLETON elsewhere."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    kappa = level.confidence if conf is None else conf
    n = len(level.assignment)
    order = np.argsort(-np.asarray(kappa), kind="stable")
    out = np.full(n, SINGLETON, dtype=np.int64)
    keep = order[:accepted_count(rate, n)]
    out[keep] = level.assignment[keep]
    return out


@dataclass
class PseudoLabelState:
    ks: list
    labels: list
    epoch: int = -1
    rate: float = 0.0
    levels: list = field(default_factory=list, repr=False)

    @classmethod
    def singletons(cls, n: int, ks: Sequence[int]) -> "PseudoLabelState":
        return cls(ks=list(ks), labels=[np.full(n, SINGLETON, dtype=np.int64) for _ in ks])

    @property
    def n_samples(self) -> int:
        return len(self.labels[0]) if self.labels else 0

    def to_dict(self) -> dict:
        out = {"epoch": self.epoch, "rate": self.rate, "levels": []}
        for i, (k, y) in enumerate(zip(self.ks, self.labels)):
            rec = {"k": int(k), "labels": [int(v) for v in y]}
            if i < len(self.levels) and self.levels[i].confidence is not None:
                rec["confidence"] = [float(v) for v in self.levels[i].confidence]
                rec["assignment"] = [int(v) for v in self.levels[i].assignment]
            out["levels"].append(rec)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoLabelState":
        return cls(
            ks=[lv["k"] for lv in d["levels"]],
            labels=[np.asarray(lv["labels"], dtype=np.int64) for lv in d["levels"]],
            epoch=d["epoch"],
            rate=d["rate"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def level_seed(seed, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(epoch), int(index)])


def refresh(features, ks: Sequence[int], schedule: AcceptanceSchedule, epoch: int, seed=0,
            tau: float = DEFAULT_TAU, max_iters: int = KMEANS_MAX_ITERS,
            restarts: int = KMEANS_RESTARTS) -> PseudoLabelState:
    """Cluster ``features`` once per k and accept the most confident labels at the scheduled rate."""
    x = as_array(features)
    rate = rate_at(schedule, epoch)
    labels, levels = [], []
    for i, k in enumerate(ks):
        level = kmeans(x, k, seed=level_seed(seed, epoch, i), max_iters=max_iters, restarts=restarts)
        level.confidence = confidence(x, level, tau)
        levels.append(level)
        labels.append(accept_labels(level, rate))
    return PseudoLabelState(ks=list(ks), labels=labels, epoch=epoch, rate=rate, levels=levels)
