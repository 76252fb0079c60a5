import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsnet.errors import ContractError
from lsnet.metrics import confusion, evaluate_dataset, format_table, score_counts

maps = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).uniform(size=(2, 12, 12)) < 0.3)


def test_confusion_examples(rng):
    gt = rng.uniform(size=(10, 10)) < 0.3
    assert confusion(gt, gt)[1:] == (0, 0)
    assert confusion(~gt, gt)[0] == 0
    gt = np.zeros(400, bool)
    gt[:100] = True
    pred = np.zeros(400, bool)
    pred[50:150] = True
    assert confusion(pred, gt) == (50, 50, 50)
    with pytest.raises(ContractError):
        confusion(np.zeros((3, 3)), np.zeros((3, 4)))


def test_empty_conventions():
    assert (score_counts(0, 0, 0).precision, score_counts(0, 0, 0).recall) == (1.0, 1.0)
    s = score_counts(0, 0, 5)
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)
    s = score_counts(0, 5, 0)
    assert (s.precision, s.recall) == (0.0, 1.0)


def test_dataset_examples():
    a = np.ones((4, 4), bool)
    res = evaluate_dataset([a, a], [a, a])
    assert (res.apr, res.arr, res.f1) == (1.0, 1.0, 1.0)
    res = evaluate_dataset([a, ~a], [a, a])
    assert res.f1 == 0.5
    with pytest.raises(ContractError):
        evaluate_dataset([], [])
    with pytest.raises(ContractError):
        evaluate_dataset([a], [a, a])


def test_macro_average_differs_from_harmonic():
    gt = np.zeros(100, bool)
    gt[:20] = True
    p1 = np.zeros(100, bool)
    p1[:20] = True
    p1[20:60] = True       # precision 1/3, recall 1
    p2 = np.zeros(100, bool)
    p2[:8] = True          # precision 1, recall 0.4
    res = evaluate_dataset([p1, p2], [gt, gt])
    harmonic = 2 * res.apr * res.arr / (res.apr + res.arr)
    assert abs(res.f1 - harmonic) > 0.05
    assert res.f1 == pytest.approx(np.mean([s.f1 for s in res.per_image]))


@settings(max_examples=100)
@given(maps)
def test_swap_roles(m):
    pred, gt = m
    if not pred.any() or not gt.any():
        return  # the empty-map conventions are deliberately asymmetric
    a = evaluate_dataset([pred], [gt]).per_image[0]
    b = evaluate_dataset([gt], [pred]).per_image[0]
    assert a.precision == b.recall and a.recall == b.precision


@settings(max_examples=100)
@given(maps, st.integers(0, 2**32 - 1))
def test_monotonicity(m, seed):
    pred, gt = m
    rng = np.random.default_rng(seed)
    base = evaluate_dataset([pred], [gt]).per_image[0]
    fewer_fp = pred & (gt | (rng.uniform(size=pred.shape) < 0.5))
    assert evaluate_dataset([fewer_fp], [gt]).per_image[0].precision >= base.precision
    more_tp = pred | (gt & (rng.uniform(size=pred.shape) < 0.5))
    assert evaluate_dataset([more_tp], [gt]).per_image[0].recall >= base.recall


def test_permutation_invariant(rng):
    preds = list(rng.uniform(size=(5, 8, 8)) < 0.4)
    gts = list(rng.uniform(size=(5, 8, 8)) < 0.4)
    a = evaluate_dataset(preds, gts)
    order = [3, 1, 4, 0, 2]
    b = evaluate_dataset([preds[i] for i in order], [gts[i] for i in order])
    assert a.apr == pytest.approx(b.apr, abs=1e-15) and a.f1 == pytest.approx(b.f1, abs=1e-15)


def test_gt_dilation_forgives_offsets():
    gt = np.zeros((10, 10), bool)
    gt[5] = True
    pred = np.zeros((10, 10), bool)
    pred[6] = True
    assert evaluate_dataset([pred], [gt]).f1 == 0
    assert evaluate_dataset([pred], [gt], gt_dilation=1).f1 == 1


def test_report_and_table():
    a = np.ones((4, 4), bool)
    res = evaluate_dataset([a], [a])
    doc = json.loads(res.dumps())
    assert doc["n_images"] == 1 and doc["per_image"][0]["tp"] == 16
    text = format_table([("LS-Net-W2", res)], "title")
    assert text.splitlines()[0] == "title" and "F1 Score" in text and "1.0000" in text
