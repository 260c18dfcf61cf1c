import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from owdet.geometry import (
    Box,
    EmptyMask,
    InvalidBox,
    box_iou,
    box_to_mask,
    cxcywh_to_xyxy,
    generalized_box_iou,
    generalized_iou,
    iou,
    mask_to_box,
    pairwise_generalized_iou,
    pairwise_iou,
    xyxy_to_cxcywh,
)
from oracles import corner_giou, corner_iou


@st.composite
def boxes(draw):
    w = draw(st.floats(0.01, 1.0))
    h = draw(st.floats(0.01, 1.0))
    cx = draw(st.floats(0.0, 1.0))
    cy = draw(st.floats(0.0, 1.0))
    return Box(cx, cy, w, h)


def test_iou_examples():
    a = Box(0.5, 0.5, 0.4, 0.2)
    assert iou(a, a) == 1.0
    assert iou(Box(0.25, 0.25, 0.5, 0.5), Box(0.75, 0.75, 0.5, 0.5)) == 0.0
    assert iou(Box(0.5, 0.5, 1.0, 1.0), Box(0.25, 0.5, 0.5, 1.0)) == pytest.approx(0.5, abs=1e-15)


def test_touching_edges_have_zero_iou():
    assert iou(Box(0.25, 0.5, 0.5, 0.5), Box(0.75, 0.5, 0.5, 0.5)) == 0.0


def test_giou_examples():
    a = Box(0.5, 0.5, 0.3, 0.3)
    assert generalized_iou(a, a) == pytest.approx(1.0)
    assert generalized_iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.9, 0.9, 0.1, 0.1)) < 0
    # hand computation: a = [0, .4] x [0, .4], b = [.2, .6] x [.2, .6]
    # inter .04, union .16 + .16 - .04 = .28, hull .36
    a, b = Box(0.2, 0.2, 0.4, 0.4), Box(0.4, 0.4, 0.4, 0.4)
    assert generalized_iou(a, b) == pytest.approx(0.04 / 0.28 - (0.36 - 0.28) / 0.36, rel=1e-12)


def test_invalid_boxes_rejected():
    for args in [(0.5, 0.5, 0.0, 0.1), (0.5, 0.5, -0.1, 0.1), (1.2, 0.5, 0.1, 0.1), (np.nan, 0.5, 0.1, 0.1)]:
        with pytest.raises(InvalidBox):
            Box(*args)
    with pytest.raises(InvalidBox):
        Box.from_sequence([0.1, 0.2, 0.3])


@given(boxes(), boxes())
def test_iou_symmetric_and_matches_oracle(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert iou(a, b) == pytest.approx(corner_iou(a.as_list(), b.as_list()), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0 + 1e-12


@given(boxes(), boxes())
def test_giou_bounded_by_iou(a, b):
    g = generalized_iou(a, b)
    assert g <= iou(a, b) + 1e-9
    assert -1.0 - 1e-12 <= g
    assert g == pytest.approx(corner_giou(a.as_list(), b.as_list()), abs=1e-12)


@given(boxes())
def test_self_overlap_is_one(a):
    assert iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert generalized_iou(a, a) == pytest.approx(1.0, abs=1e-12)


@given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
def test_numpy_and_torch_agree(xs, ys):
    a = np.array([b.as_list() for b in xs])
    b = np.array([b.as_list() for b in ys])
    np_iou = pairwise_iou(a, b)
    np_giou = pairwise_generalized_iou(a, b)
    t_iou = box_iou(torch.tensor(a), torch.tensor(b)).numpy()
    t_giou = generalized_box_iou(torch.tensor(a), torch.tensor(b)).numpy()
    np.testing.assert_allclose(np_iou, t_iou, atol=1e-12)
    np.testing.assert_allclose(np_giou, t_giou, atol=1e-12)


@given(st.lists(boxes(), min_size=1, max_size=6))
def test_corner_roundtrip(xs):
    a = np.array([b.as_list() for b in xs])
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(a)), a, atol=1e-12)


def test_mask_examples():
    full = np.ones((8, 10), dtype=bool)
    assert mask_to_box(full).as_list() == [0.5, 0.5, 1.0, 1.0]
    one = np.zeros((8, 10), dtype=bool)
    one[2, 3] = True
    assert mask_to_box(one).corners == pytest.approx((0.3, 0.25, 0.4, 0.375))
    ell = np.zeros((10, 10), dtype=bool)
    ell[2:8, 1] = True
    ell[7, 1:6] = True
    # oracle: scan the set bits
    rows, cols = np.nonzero(ell)
    expect = (cols.min() / 10, rows.min() / 10, (cols.max() + 1) / 10, (rows.max() + 1) / 10)
    assert mask_to_box(ell).corners == pytest.approx(expect)
    with pytest.raises(EmptyMask):
        mask_to_box(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        mask_to_box(full, image_w=3, image_h=8)


@given(st.integers(1, 24), st.integers(1, 24), st.data())
def test_mask_box_covers_every_pixel(h, w, data):
    bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    mask = np.array(bits, dtype=bool).reshape(h, w)
    if not mask.any():
        mask[data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1))] = True
    box = mask_to_box(mask)
    raster = box_to_mask(box, w, h)
    assert not np.any(mask & ~raster)
    # tightness: the rasterized box is exactly the bounding rectangle
    rows, cols = np.nonzero(mask)
    expect = np.zeros_like(mask)
    expect[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
    assert np.array_equal(raster, expect)
