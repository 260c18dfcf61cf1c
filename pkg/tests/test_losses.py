import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from owdet.losses import (
    TERMS,
    LossWeights,
    PairingMismatch,
    aux_objectness_loss,
    aux_regression_loss,
    layer_detection_losses,
    objectness_loss,
    sigmoid_focal_loss,
    soft_weights,
    total_loss,
)
from owdet.matching import MatchResult
from owdet.model import ObjectnessModel
from helpers import TERM_NAMES, gradient_check, term_functions, tiny_problem


def test_default_weights():
    w = LossWeights()
    assert (w.cls, w.l1, w.giou) == (2.0, 5.0, 2.0)
    assert w.obj == 8e-4 and w.obj_pse == 8e-5 and w.reg_pse == 5.0
    # the pseudo objectness coefficient is one tenth of the objectness one
    assert w.obj_pse == pytest.approx(w.obj / 10)
    assert w.reg_pse == w.l1
    with pytest.raises(ValueError):
        LossWeights(obj=-1)


def test_objectness_loss_examples():
    om = ObjectnessModel(3, eps=1e-12).double()
    mean = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    om.mean.copy_(mean)
    q = mean.repeat(1, 2, 1)
    m = [MatchResult([(0, 0), (1, 1)], [], [])]
    assert float(objectness_loss(om.distance_sq(q), m)) == 0.0
    q = (mean + torch.tensor([1.0, 0, 0], dtype=torch.float64))[None, None]
    assert float(objectness_loss(om.distance_sq(q), [MatchResult([(0, 0)], [], [])])) == pytest.approx(1.0, rel=1e-10)
    rng = np.random.default_rng(0)
    var = rng.uniform(0.5, 2, 3)
    om.cov.copy_(torch.tensor(np.diag(var)))
    q = torch.tensor(rng.normal(size=(1, 3, 3)))
    expect = sum(float(((q[0, i] - mean) ** 2 / torch.tensor(var)).sum()) for i in range(3))
    got = float(objectness_loss(om.distance_sq(q), [MatchResult([(0, 0), (1, 1), (2, 2)], [], [])]))
    assert got == pytest.approx(expect, rel=1e-9)
    assert float(objectness_loss(torch.ones(1, 3), [MatchResult([], [0, 1, 2], [])])) == 0.0


def test_aux_objectness_examples():
    d = torch.tensor([[0.0, 1.0, 4.0]], dtype=torch.float64)
    assert float(aux_objectness_loss(d, [MatchResult([], [0, 1, 2], [])])) == 0.0
    assert float(aux_objectness_loss(d, [MatchResult([], [0, 1, 2], [(0, 0)])])) == 0.0
    got = float(aux_objectness_loss(d, [MatchResult([], [0, 1, 2], [(1, 0)])], 1.3))
    assert got == pytest.approx(math.exp(-1.3), rel=1e-14)


def test_aux_regression_examples():
    d = torch.zeros(1, 3, dtype=torch.float64)
    pred = torch.tensor([[[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1], [0.6, 0.4, 0.2, 0.3]]], dtype=torch.float64)
    m = [MatchResult([], [0, 1, 2], [(0, 0)])]
    assert float(aux_regression_loss(pred, d, m, [pred[0, :1].clone()])) == 0.0
    target = [pred[0, :1] + 0.1]
    assert float(aux_regression_loss(pred, d, m, target)) == pytest.approx(0.4, abs=1e-12)
    # two pairs with distinct weights, averaged over the pairs
    d = torch.tensor([[0.5, 0.0, 2.0]], dtype=torch.float64)
    m = [MatchResult([], [0, 1, 2], [(0, 1), (2, 0)])]
    boxes = torch.tensor([[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.1, 0.1]], dtype=torch.float64)
    l1_0 = 0.0 + 0.0 + 0.1 + 0.1
    l1_2 = 0.1 + 0.1 + 0.3 + 0.2
    expect = (math.exp(-1.3 * 0.5) * l1_0 + math.exp(-1.3 * 2.0) * l1_2) / 2
    assert float(aux_regression_loss(pred, d, m, [boxes], 1.3)) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(PairingMismatch):
        aux_regression_loss(pred, d, [MatchResult([], [0], [(0, 3)])], [boxes])


@given(st.lists(st.floats(0, 50), min_size=1, max_size=8), st.floats(0, 3))
def test_aux_objectness_bounded_by_unweighted(dists, t):
    d = torch.tensor([dists], dtype=torch.float64)
    m = [MatchResult([], list(range(len(dists))), [(i, i) for i in range(len(dists))])]
    weighted = float(aux_objectness_loss(d, m, t))
    unweighted = float(aux_objectness_loss(d, m, t, soft=False))
    assert 0.0 <= weighted <= unweighted + 1e-12


def test_soft_weights_are_detached():
    d = torch.tensor([1.0, 2.0], requires_grad=True)
    w = soft_weights(d, 1.3)
    assert not w.requires_grad
    assert torch.equal(soft_weights(d, 1.3, enabled=False), torch.ones(2))


def test_detection_loss_examples():
    boxes = torch.tensor([[[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]]], dtype=torch.float64)
    logits = torch.tensor([[[30.0, -30.0], [-30.0, -30.0]]], dtype=torch.float64)
    targets = [{"boxes": boxes[0, :1], "labels": torch.tensor([0])}]
    m = [MatchResult([(0, 0)], [1], [])]
    cls, l1, giou = layer_detection_losses(logits, boxes, targets, m, 1)
    assert float(l1) == 0.0 and float(giou) == pytest.approx(0.0, abs=1e-12)
    assert float(cls) < 1e-3
    # no ground truth: only the background focal term remains
    logits = torch.tensor([[[0.3, -0.2], [1.0, 0.0]]], dtype=torch.float64)
    cls, l1, giou = layer_detection_losses(logits, boxes, [{"boxes": torch.zeros(0, 4), "labels": torch.zeros(0, dtype=torch.long)}], [MatchResult([], [0, 1], [])], 1)
    assert float(l1) == 0.0 and float(giou) == 0.0
    p = torch.sigmoid(logits)
    expect = (0.75 * -torch.log(1 - p) * p**2).sum()
    assert float(cls) == pytest.approx(float(expect), rel=1e-12)


def test_focal_single_value():
    # hand evaluation for one positive logit
    x = 0.7
    p = 1 / (1 + math.exp(-x))
    expect = 0.25 * (1 - p) ** 2 * -math.log(p)
    got = float(sigmoid_focal_loss(torch.tensor([x], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)))
    assert got == pytest.approx(expect, rel=1e-12)


def test_total_loss_examples():
    zero = {k: torch.tensor(0.0) for k in TERMS}
    total, report = total_loss(zero, LossWeights())
    assert float(total) == 0.0
    terms = {k: torch.tensor(float(i + 1)) for i, k in enumerate(TERMS)}
    w = LossWeights(obj_pse=0.0)
    total, report = total_loss(terms, w)
    moved = dict(terms, aux_obj=torch.tensor(1e6))
    assert float(total_loss(moved, w)[0]) == float(total)
    expect = sum(LossWeights(obj_pse=0.0).as_terms()[k] * float(terms[k]) for k in TERMS)
    assert report.total == pytest.approx(expect, rel=1e-6)
    with pytest.raises(KeyError):
        total_loss({"cls": torch.tensor(1.0)}, w)


@given(st.sampled_from(TERMS), st.floats(-10, 10))
def test_total_linear_in_each_term(name, delta):
    terms = {k: torch.tensor(1.0, dtype=torch.float64) for k in TERMS}
    w = LossWeights()
    base = float(total_loss(terms, w)[0])
    bumped = float(total_loss(dict(terms, **{name: terms[name] + delta}), w)[0])
    assert bumped - base == pytest.approx(w.as_terms()[name] * delta, abs=1e-9)


def test_report_serializes_every_term():
    terms = {k: torch.tensor(0.5) for k in TERMS}
    _, report = total_loss(terms, LossWeights(), step=3)
    line = report.to_json()
    for k in TERMS:
        assert f'"loss_{k}"' in line
    assert '"step": 3' in line


@pytest.mark.parametrize("name", TERM_NAMES)
def test_term_gradients_match_finite_differences(name):
    problem = tiny_problem(1)
    analytic, frozen = term_functions(*problem)
    worst, checked = gradient_check(problem[0], analytic(name), frozen(name), seed=2)
    assert checked > 0
    assert worst < 1e-3
