import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifnd.errors import EmptyLevels, LabelCardinalityMismatch, NotApplicable, UnnormalizedInput
from ifnd.losses import (
    SINGLETON,
    Objective,
    ViewBatch,
    hard_mining_coefficients,
    hierarchical_loss,
    loss_attr,
    loss_elim,
    loss_inst,
    view_labels,
)

from oracles import central_difference, naive_loss, rel_close, supcon_loss, unit_rows


def make_batch(seed, m, d):
    return ViewBatch(unit_rows(np.random.default_rng(seed), 2 * m, d))


def loss_fn(objective, labels, tau):
    def f(z):
        batch = ViewBatch(z)
        if objective == "inst":
            return loss_inst(batch, tau, check_norm=False).value
        if objective == "elim":
            return loss_elim(batch, labels, tau, check_norm=False).value
        return loss_attr(batch, labels, tau, check_norm=False).value
    return f


def test_single_image_inst_is_zero():
    batch = make_batch(0, 1, 4)
    rep = loss_inst(batch, 0.5)
    assert rep.value == 0.0
    np.testing.assert_array_equal(rep.per_anchor, [0.0, 0.0])


def test_inst_matches_naive_transcription():
    batch = make_batch(1, 4, 8)
    rep = loss_inst(batch, 0.5)
    ref = naive_loss(batch.embeddings.tolist(), None, 0.5, "inst")
    np.testing.assert_allclose(rep.per_anchor, ref, rtol=0, atol=1e-12)
    assert abs(rep.value - np.mean(ref)) < 1e-12


@pytest.mark.parametrize("objective", ["elim", "attr"])
def test_label_losses_match_naive_transcription(objective):
    batch = make_batch(2, 6, 8)
    y = view_labels([0, 1, 0, SINGLETON, 1, 2])
    fn = loss_elim if objective == "elim" else loss_attr
    rep = fn(batch, y, 0.3)
    ref = naive_loss(batch.embeddings.tolist(), list(y), 0.3, objective)
    np.testing.assert_allclose(rep.per_anchor, ref, rtol=0, atol=1e-12)


def test_inst_gradient_finite_differences():
    batch = make_batch(3, 4, 8)
    rep = loss_inst(batch, 0.5)
    num = central_difference(loss_fn("inst", None, 0.5), batch.embeddings)
    assert rel_close(rep.grad, num)


@pytest.mark.parametrize("objective", ["elim", "attr"])
def test_planted_false_negatives_gradient(objective):
    # sources 0/3 and 1/4 are planted false-negative pairs
    batch = make_batch(4, 6, 8)
    y = view_labels([7, 8, SINGLETON, 7, 8, SINGLETON])
    num = central_difference(loss_fn(objective, y, 0.5), batch.embeddings)
    fn = loss_elim if objective == "elim" else loss_attr
    assert rel_close(fn(batch, y, 0.5).grad, num)


@pytest.mark.parametrize("objective", ["elim", "attr"])
def test_anchor_role_gradient_matches_appendix_form(objective):
    batch = make_batch(5, 4, 6)
    z = batch.embeddings
    tau = 0.4
    y = view_labels([1, 1, 2, SINGLETON])
    fn = loss_elim if objective == "elim" else loss_attr
    rep = fn(batch, y, tau)
    coef = hard_mining_coefficients(rep)
    for i in range(len(z)):
        expected = sum(coef.sigma_minus[i, n] / tau * z[n] for n in np.flatnonzero(coef.negative[i]))
        expected = expected - sum(coef.sigma_plus[i, p] / tau * z[p] for p in np.flatnonzero(coef.positive[i]))
        np.testing.assert_allclose(rep.anchor_grad[i], expected, atol=1e-12)

        def term(zi, i=i):
            zz = z.copy()
            zz[i] = zi
            r = fn(ViewBatch(zz), y, tau, check_norm=False)
            return r.per_anchor[i]
        assert rel_close(rep.anchor_grad[i], central_difference(term, z[i]))


def test_all_shared_label_elim_is_zero():
    batch = make_batch(6, 5, 4)
    rep = loss_elim(batch, np.zeros(10, dtype=int), 0.2)
    np.testing.assert_allclose(rep.per_anchor, 0.0, atol=1e-15)
    assert rep.value == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("fn", [loss_elim, loss_attr])
def test_all_singleton_reduces_to_inst(fn):
    batch = make_batch(7, 5, 4)
    y = np.full(10, SINGLETON)
    a, b = fn(batch, y, 0.2), loss_inst(batch, 0.2)
    assert abs(a.value - b.value) <= 1e-12
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)
    np.testing.assert_allclose(a.per_anchor, b.per_anchor, atol=1e-12)


def test_singleton_labels_never_match_each_other():
    batch = make_batch(8, 3, 4)
    y = np.full(6, SINGLETON)
    rep = loss_attr(batch, y, 0.5)
    assert rep.positives.sum(axis=1).tolist() == [1] * 6


def test_attr_with_true_classes_is_supcon():
    rng = np.random.default_rng(9)
    batch = ViewBatch(unit_rows(rng, 12, 5))
    classes = view_labels([0, 1, 2, 0, 1, 0])
    rep = loss_attr(batch, classes, 0.3)
    assert abs(rep.value - supcon_loss(batch.embeddings, classes, 0.3)) <= 1e-12


def test_sigma_monotone_two_negatives():
    z = np.array([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8], [-1.0, 0.0]])
    rep = loss_elim(ViewBatch(z), np.full(4, SINGLETON), 0.5)
    coef = hard_mining_coefficients(rep)
    assert coef.sigma_minus[0, 2] > coef.sigma_minus[0, 3]


def test_sigma_hand_case():
    # anchor e1, positive and one negative both at 60 degrees, the other negative antipodal
    c, s = 0.5, math.sqrt(3) / 2
    z = np.array([[1.0, 0.0], [c, s], [c, -s], [-1.0, 0.0]])
    tau = 0.5
    coef = hard_mining_coefficients(loss_elim(ViewBatch(z), np.full(4, SINGLETON), tau))
    total = 2 * math.e + math.exp(-2)
    assert coef.sigma_minus[0, 2] == pytest.approx(math.e / total, rel=1e-12)
    assert coef.sigma_minus[0, 3] == pytest.approx(math.exp(-2) / total, rel=1e-12)
    assert coef.sigma_plus[0, 1] == pytest.approx(1 - math.e / total, rel=1e-12)
    # equidistant negative and positive carry the same ratio
    assert coef.ratios[0, 1] == pytest.approx(coef.ratios[0, 2], rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 5]), st.sampled_from([0.1, 0.5, 1.0]))
def test_ratios_sum_to_one(seed, m, tau):
    rng = np.random.default_rng(seed)
    batch = ViewBatch(unit_rows(rng, 2 * m, 4))
    y = view_labels(rng.integers(-1, 2, size=m))
    for fn in (loss_elim, loss_attr):
        rep = fn(batch, y, tau)
        np.testing.assert_allclose(rep.ratios.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(rep.per_anchor >= 0) and np.all(np.isfinite(rep.grad))
        assert abs(rep.value - rep.per_anchor.mean()) <= 1e-10


def test_triplet_limit_direction():
    # views 2 and 3 coincide, so the anchor sees a single negative direction
    z = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.0, 0.6, 0.8]])
    rep = loss_elim(ViewBatch(z), np.full(4, SINGLETON), 0.5)
    basis = np.stack([z[2], z[1]], axis=1)
    coeffs, *_ = np.linalg.lstsq(basis, rep.anchor_grad[0], rcond=None)
    np.testing.assert_allclose(basis @ coeffs, rep.anchor_grad[0], atol=1e-12)
    assert coeffs[0] > 0 and coeffs[1] < 0


def test_hierarchical_identical_levels():
    batch = make_batch(10, 4, 4)
    y = view_labels([0, 0, 1, SINGLETON])
    single = loss_elim(batch, y, 0.2)
    multi = hierarchical_loss(batch, [y, y, y], Objective.ELIM, 0.2)
    assert abs(single.value - multi.value) <= 1e-12
    np.testing.assert_allclose(single.grad, multi.grad, atol=1e-12)


def test_hierarchical_singletons_equal_inst():
    batch = make_batch(11, 4, 4)
    y = np.full(8, SINGLETON)
    rep = hierarchical_loss(batch, [y, y], "attr", 0.2)
    assert abs(rep.value - loss_inst(batch, 0.2).value) <= 1e-12


def test_hierarchical_two_levels_is_average():
    batch = make_batch(12, 5, 6)
    coarse = view_labels([0, 0, 1, 1, 0])
    fine = view_labels([0, 1, 2, 3, 0])
    rep = hierarchical_loss(batch, [coarse, fine], "elim", 0.3)
    a, b = loss_elim(batch, coarse, 0.3), loss_elim(batch, fine, 0.3)
    assert abs(rep.value - (a.value + b.value) / 2) <= 1e-12
    np.testing.assert_allclose(rep.grad, (a.grad + b.grad) / 2, atol=1e-12)


def test_hierarchical_needs_levels():
    with pytest.raises(EmptyLevels):
        hierarchical_loss(make_batch(0, 2, 2), [], "elim", 0.2)


def test_errors():
    batch = make_batch(0, 2, 3)
    with pytest.raises(UnnormalizedInput):
        loss_inst(ViewBatch(batch.embeddings * 2), 0.2)
    with pytest.raises(LabelCardinalityMismatch):
        loss_elim(batch, [0, 0, 1], 0.2)
    with pytest.raises(ValueError):
        loss_elim(batch, [0, 1, 1, 1], 0.2)
    with pytest.raises(NotApplicable):
        hard_mining_coefficients(loss_inst(batch, 0.2))


def test_view_batch_pairing():
    batch = ViewBatch.from_views(np.eye(3), -np.eye(3))
    assert batch.m_source == 3
    assert batch.pair_of.tolist() == [1, 0, 3, 2, 5, 4]
    np.testing.assert_array_equal(batch.embeddings[1], [-1, 0, 0])


def test_report_serializes():
    import json
    rep = loss_elim(make_batch(0, 2, 3), view_labels([0, 1]), 0.2)
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["objective"] == "elim" and len(d["grad"]) == 4
