"""Contrastive objectives over a batch of paired views.

A batch holds ``2M`` unit embeddings where rows ``2j`` and ``2j + 1`` are the
two augmented views of source sample ``j``. Every view acts as an anchor once.
For an anchor ``i`` with positive view ``i'`` the three objectives differ only
in which views enter the softmax denominator ``S(i)`` and which count as
positives ``P(i)``:

=========  ===============================  =================================
objective  S(i)                             P(i)
=========  ===============================  =================================
inst       all other views                  {i'}
elim       {i'} + views with another label  {i'}
attr       all other views                  {i'} + views sharing the label
=========  ===============================  =================================

Each per-anchor term is ``-(1/|P|) sum_p log(sim(z_i, z_p) / sum_S sim(z_i, z_s))``.
Writing ``A[i, s]`` for the softmax ratio over ``S(i)`` and ``W[i, p] = 1/|P(i)|``,
the anchor-role gradient is ``(A - W)[i] @ Z / tau`` and the gradient of the
batch sum with respect to every view is ``(C + C.T) @ Z / tau`` with ``C = A - W``.
Reported values and total gradients use the mean over anchors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import UNIT_TOL, as_array
from .errors import (
    EmptyLevels,
    LabelCardinalityMismatch,
    NotApplicable,
    UnnormalizedInput,
)

SINGLETON = -1


class Objective(str, enum.Enum):
    INST = "inst"
    ELIM = "elim"
    ATTR = "attr"


@dataclass(frozen=True)
class ViewBatch:
    """``2M`` views; rows ``2j`` (anchor view) and ``2j+1`` (positive view) share a source."""

    embeddings: np.ndarray

    def __post_init__(self):
        z = as_array(self.embeddings)
        if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] == 0:
            raise ValueError(f"a view batch needs an even, nonzero row count; got shape {z.shape}")
        object.__setattr__(self, "embeddings", z)

    @classmethod
    def from_views(cls, first, second) -> "ViewBatch":
        first, second = as_array(first), as_array(second)
        if first.shape != second.shape:
            raise ValueError("view arrays must have the same shape")
        z = np.empty((2 * first.shape[0], first.shape[1]))
        z[0::2] = first
        z[1::2] = second
        return cls(z)

    @property
    def m_source(self) -> int:
        return self.embeddings.shape[0] // 2

    @property
    def pair_of(self) -> np.ndarray:
        return np.arange(self.embeddings.shape[0]) ^ 1


def view_labels(per_source: Sequence[int]) -> np.ndarray:
    """Expand one label per source sample to one label per view."""
    return np.repeat(np.asarray(per_source, dtype=np.int64), 2)


def same_label_mask(labels: np.ndarray) -> np.ndarray:
    """``mask[a, b]`` is true when a and b carry the same non-SINGLETON label (a != b)."""
    y = np.asarray(labels)
    mask = (y[:, None] == y[None, :]) & (y[:, None] != SINGLETON)
    np.fill_diagonal(mask, False)
    return mask


@dataclass
class LossReport:
    objective: Objective
    tau: float
    value: float
    per_anchor: np.ndarray
    grad: np.ndarray
    anchor_grad: np.ndarray
    ratios: np.ndarray
    positive_weights: np.ndarray
    denominator: np.ndarray
    positives: np.ndarray
    levels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.value,
            "tau": self.tau,
            "value": self.value,
            "per_anchor": self.per_anchor.tolist(),
            "grad": self.grad.tolist(),
            "anchor_grad": self.anchor_grad.tolist(),
            "levels": len(self.levels),
        }


def _validate(batch: ViewBatch, labels, check_norm: bool) -> np.ndarray | None:
    z = batch.embeddings
    if check_norm and not np.all(np.abs(np.linalg.norm(z, axis=1) - 1.0) <= UNIT_TOL):
        raise UnnormalizedInput("batch embeddings must be unit-norm rows")
    if labels is None:
        return None
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (z.shape[0],):
        raise LabelCardinalityMismatch(
            f"expected {z.shape[0]} view labels, got shape {y.shape}"
        )
    if np.any(y[0::2] != y[1::2]):
        raise ValueError("both views of a source sample must carry the same label")
    return y


def _contrastive(z: np.ndarray, denominator: np.ndarray, positives: np.ndarray,
                 tau: float, objective: Objective) -> LossReport:
    n = z.shape[0]
    logits = z @ z.T / tau
    masked = np.where(denominator, logits, -np.inf)
    peak = masked.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(masked - peak).sum(axis=1))
    ratios = np.where(denominator, np.exp(masked - lse[:, None]), 0.0)
    weights = positives / positives.sum(axis=1, keepdims=True)
    log_ratio = np.where(positives, logits - lse[:, None], 0.0)
    per_anchor = -(weights * log_ratio).sum(axis=1)

    coef = ratios - weights
    anchor_grad = coef @ z / tau
    grad = (coef + coef.T) @ z / tau / n
    return LossReport(
        objective=objective,
        tau=tau,
        value=float(per_anchor.mean()),
        per_anchor=per_anchor,
        grad=grad,
        anchor_grad=anchor_grad,
        ratios=ratios,
        positive_weights=weights,
        denominator=denominator,
        positives=positives,
    )


def _masks(n: int, same: np.ndarray | None, objective: Objective):
    idx = np.arange(n)
    pair = np.zeros((n, n), dtype=bool)
    pair[idx, idx ^ 1] = True
    others = ~np.eye(n, dtype=bool)
    if same is None or objective is Objective.INST:
        return others, pair
    if objective is Objective.ELIM:
        return (others & ~same) | pair, pair
    return others, pair | same


def loss_inst(batch: ViewBatch, tau: float, *, check_norm: bool = True) -> LossReport:
    """Instance-level loss: the only positive of an anchor is its paired view."""
    _validate(batch, None, check_norm)
    den, pos = _masks(batch.embeddings.shape[0], None, Objective.INST)
    return _contrastive(batch.embeddings, den, pos, tau, Objective.INST)


def loss_elim(batch: ViewBatch, labels, tau: float, *, check_norm: bool = True) -> LossReport:
    """Drop views sharing the anchor's pseudo label from the denominator."""
    y = _validate(batch, labels, check_norm)
    den, pos = _masks(len(y), same_label_mask(y), Objective.ELIM)
    return _contrastive(batch.embeddings, den, pos, tau, Objective.ELIM)


def loss_attr(batch: ViewBatch, labels, tau: float, *, check_norm: bool = True) -> LossReport:
    """Treat views sharing the anchor's pseudo label as extra positives."""
    y = _validate(batch, labels, check_norm)
    den, pos = _masks(len(y), same_label_mask(y), Objective.ATTR)
    return _contrastive(batch.embeddings, den, pos, tau, Objective.ATTR)


def contrastive_loss(batch: ViewBatch, labels, tau: float, objective, *,
                     check_norm: bool = True) -> LossReport:
    objective = Objective(objective)
    if objective is Objective.INST:
        return loss_inst(batch, tau, check_norm=check_norm)
    if objective is Objective.ELIM:
        return loss_elim(batch, labels, tau, check_norm=check_norm)
    return loss_attr(batch, labels, tau, check_norm=check_norm)


@dataclass
class CoefficientTable:
    """Per-anchor weights from the anchor-role gradient.

    ``sigma_minus[i, n]`` is set where ``negative[i, n]``; ``sigma_plus[i, p]``
    where ``positive[i, p]``. Other entries are zero.
    """

    sigma_minus: np.ndarray
    sigma_plus: np.ndarray
    negative: np.ndarray
    positive: np.ndarray
    ratios: np.ndarray

    def for_anchor(self, i: int) -> dict:
        return {
            "negatives": {int(n): float(self.sigma_minus[i, n]) for n in np.flatnonzero(self.negative[i])},
            "positives": {int(p): float(self.sigma_plus[i, p]) for p in np.flatnonzero(self.positive[i])},
        }


def hard_mining_coefficients(report: LossReport) -> CoefficientTable:
    if report.objective is Objective.INST:
        raise NotApplicable("coefficients are defined for elimination/attraction reports")
    if report.levels:
        raise NotApplicable("take coefficients from a single level, not a hierarchical average")
    negative = report.denominator & ~report.positives
    sigma_minus = np.where(negative, report.ratios, 0.0)
    sigma_plus = np.where(report.positives, report.positive_weights - report.ratios, 0.0)
    return CoefficientTable(sigma_minus, sigma_plus, negative, report.positives.copy(), report.ratios)


def hierarchical_loss(batch: ViewBatch, labels_per_level, objective, tau: float, *,
                      check_norm: bool = True) -> LossReport:
    """Average the chosen objective over several label granularities."""
    levels = list(labels_per_level)
    if not levels:
        raise EmptyLevels("hierarchical_loss needs at least one label level")
    objective = Objective(objective)
    reports = [contrastive_loss(batch, y, tau, objective, check_norm=check_norm) for y in levels]
    if len(reports) == 1:
        return reports[0]
    k = len(reports)
    per_anchor = sum(r.per_anchor for r in reports) / k
    first = reports[0]
    return LossReport(
        objective=objective,
        tau=tau,
        value=float(np.mean([r.value for r in reports])),
        per_anchor=per_anchor,
        grad=sum(r.grad for r in reports) / k,
        anchor_grad=sum(r.anchor_grad for r in reports) / k,
        ratios=first.ratios,
        positive_weights=first.positive_weights,
        denominator=first.denominator,
        positives=first.positives,
        levels=reports,
    )
