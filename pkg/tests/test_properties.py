"""Property-based checks over the numeric core."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semiseg import inference, metrics, model, pseudolabel
from semiseg.synthdata import IGNORE

finite = st.floats(-50.0, 50.0, allow_nan=False)


@st.composite
def prob_maps(draw, max_c=5, max_hw=6):
    c = draw(st.integers(2, max_c))
    h = draw(st.integers(1, max_hw))
    w = draw(st.integers(1, max_hw))
    raw = draw(hnp.arrays(np.float64, (c, h, w),
                          elements=st.floats(1e-3, 1.0)))
    return raw / raw.sum(axis=0)


@given(prob_maps())
@settings(max_examples=50, deadline=None)
def test_entropy_bounds(probs):
    ent = pseudolabel.entropy_map(probs)
    assert np.all(ent >= -1e-12)
    assert np.all(ent <= np.log(probs.shape[0]) + 1e-12)


@given(prob_maps(), st.floats(0.05, 0.95))
@settings(max_examples=50, deadline=None)
def test_threshold_between_extremes(probs, drop):
    ent = pseudolabel.entropy_map(probs)
    gamma = pseudolabel.threshold_gamma(ent, drop)
    assert ent.min() - 1e-12 <= gamma <= ent.max() + 1e-12


@given(prob_maps(), st.floats(0.05, 0.95))
@settings(max_examples=50, deadline=None)
def test_pseudo_labels_are_argmax_or_ignore(probs, drop):
    ent = pseudolabel.entropy_map(probs)
    gamma = pseudolabel.threshold_gamma(ent, drop)
    labels = pseudolabel.make_pseudo_labels(probs, ent, gamma).labels
    arg = np.argmax(probs, axis=0)
    keep = labels != IGNORE
    assert np.array_equal(labels[keep], arg[keep].astype(np.uint8))
    assert np.array_equal(~keep, ent >= gamma)


@given(hnp.arrays(np.float64, (4, 3, 3), elements=finite),
       st.floats(-20.0, 20.0))
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariance_and_normalization(logits, shift):
    a = model.softmax(logits, axis=0)
    b = model.softmax(logits + shift, axis=0)
    assert np.max(np.abs(a.sum(axis=0) - 1.0)) < 1e-12
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.all(a >= 0.0)


@given(hnp.arrays(np.float64, (2, 4, 5), elements=finite))
@settings(max_examples=50, deadline=None)
def test_hflip_involution(arr):
    assert np.array_equal(inference.hflip(inference.hflip(arr)), arr)


@given(hnp.arrays(np.float64, (2, 4, 4), elements=st.floats(0.0, 1.0)),
       st.integers(1, 9), st.integers(1, 9))
@settings(max_examples=50, deadline=None)
def test_resize_respects_value_range(arr, out_h, out_w):
    out = inference.resize_bilinear(arr, out_h, out_w)
    assert out.shape == (2, out_h, out_w)
    assert out.min() >= arr.min() - 1e-12
    assert out.max() <= arr.max() + 1e-12


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_confusion_diagonal_for_perfect_predictions(c, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, c, size=(6, 6)).astype(np.uint8)
    cm = metrics.accumulate_confusion(gt, gt.copy(), metrics.new_confusion(c))
    assert np.all(cm == np.diag(np.diag(cm)))
    assert cm.sum() == gt.size
