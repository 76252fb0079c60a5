"""Pixel-level precision / recall / F1, macro-averaged over images.

APR and ARR are the means of the per-image precision and recall, and the
dataset F1 is the mean of the per-image F1 scores (not the harmonic mean of
APR and ARR).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from lsnet.errors import ContractError


@dataclass
class ImageScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def as_dict(self):
        return dict(precision=self.precision, recall=self.recall, f1=self.f1,
                    tp=self.tp, fp=self.fp, fn=self.fn)


@dataclass
class EvalResult:
    apr: float
    arr: float
    f1: float
    per_image: list = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def to_json(self) -> dict:
        return {
            "apr": self.apr,
            "arr": self.arr,
            "f1": self.f1,
            "n_images": self.n_images,
            "per_image": [s.as_dict() for s in self.per_image],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def confusion(pred, gt):
    """Pixel counts ``(tp, fp, fn)`` of two binary maps."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def score_counts(tp: int, fp: int, fn: int) -> ImageScore:
    if tp + fp == 0:
        precision = 1.0 if tp + fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ImageScore(precision, recall, f1, tp, fp, fn)


def evaluate_dataset(pred_maps, gt_maps, gt_dilation: int = 0) -> EvalResult:
    """Macro-averaged APR / ARR / F1 over aligned lists of binary maps.

    ``gt_dilation`` > 0 counts predicted pixels within that many pixels of
    the ground truth as correct (off by default).
    """
    pred_maps = list(pred_maps)
    gt_maps = list(gt_maps)
    if not pred_maps:
        raise ContractError("cannot evaluate an empty dataset")
    if len(pred_maps) != len(gt_maps):
        raise ContractError(f"{len(pred_maps)} predictions vs {len(gt_maps)} ground-truth maps")
    scores = []
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(getattr(pred, "values", pred)).astype(bool)
        gt = np.asarray(getattr(gt, "values", gt)).astype(bool)
        if gt_dilation > 0:
            tol = ndimage.binary_dilation(gt, iterations=int(gt_dilation))
            tp = int(np.count_nonzero(pred & tol))
            fp = int(np.count_nonzero(pred & ~tol))
            fn = int(np.count_nonzero(gt & ~ndimage.binary_dilation(pred, iterations=int(gt_dilation))))
        else:
            tp, fp, fn = confusion(pred, gt)
        scores.append(score_counts(tp, fp, fn))
    return EvalResult(
        apr=float(np.mean([s.precision for s in scores])),
        arr=float(np.mean([s.recall for s in scores])),
        f1=float(np.mean([s.f1 for s in scores])),
        per_image=scores,
    )


def format_table(rows, title: str = "") -> str:
    """Plain-text table of ``(method, EvalResult)`` rows, APR / ARR / F1 columns."""
    name_w = max([len("Method")] + [len(name) for name, _ in rows])
    line = f"{'Method':<{name_w}} | {'APR':>6} | {'ARR':>6} | {'F1 Score':>8}"
    out = []
    if title:
        out.append(title)
    out.append(line)
    out.append("-" * len(line))
    for name, res in rows:
        out.append(f"{name:<{name_w}} | {res.apr:6.4f} | {res.arr:6.4f} | {res.f1:8.4f}")
    return "\n".join(out)
