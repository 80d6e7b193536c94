"""Segmentation quality metrics: mIoU, weighted IoU and video consistency.

The confusion matrix is indexed [ground truth, prediction]; pixels with the
255 ignore label in the ground truth are excluded everywhere.  VCn scores,
for every window of n consecutive frames, the pixels whose ground-truth
label is constant over the window and requires the prediction to match the
ground truth on the whole window.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EvaluationError, ValidationError
from .synthdata import IGNORE


@dataclass
class MetricReport:
    miou: float
    weighted_iou: float
    per_class_iou: np.ndarray       # NaN marks classes absent from GT and Pred
    vc: dict                        # window length -> score (NaN if no clip long enough)

    @property
    def vc8(self):
        return self.vc.get(8, float("nan"))

    @property
    def vc16(self):
        return self.vc.get(16, float("nan"))


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(gt, pred, cm):
    """Add one frame's counts to cm; gt pixels labeled 255 are skipped."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValidationError("gt/pred shape mismatch")
    if np.any(pred == IGNORE):
        raise ValidationError("prediction contains the 255 ignore label")
    num_classes = cm.shape[0]
    valid = gt != IGNORE
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    cm += np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)
    return cm


def per_class_iou(cm):
    """IoU per class; NaN where the class appears in neither GT nor Pred."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    return iou


def miou(cm):
    """Mean IoU over classes present in GT or Pred; also returns per-class IoUs."""
    if cm.sum() == 0:
        raise EvaluationError("empty confusion matrix")
    ious = per_class_iou(cm)
    return float(np.nanmean(ious)), ious


def weighted_iou(cm):
    """Class IoUs weighted by ground-truth pixel frequency."""
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    ious = per_class_iou(cm)
    freq = cm.sum(axis=1) / total
    present = freq > 0
    return float(np.sum(freq[present] * ious[present]))


def video_consistency(gt_clip, pred_clip, n):
    """Mean over n-frame windows of correct-throughout / GT-constant pixels.

    Windows where no pixel keeps a constant non-255 ground-truth label are
    skipped; returns NaN if every window is skipped.
    """
    if len(gt_clip) != len(pred_clip):
        raise ValidationError("gt/pred clip lengths differ")
    if len(gt_clip) < n:
        raise ValidationError("clip shorter than the window length")
    gt = np.stack(gt_clip)
    pred = np.stack(pred_clip)
    scores = []
    for start in range(len(gt_clip) - n + 1):
        g = gt[start:start + n]
        p = pred[start:start + n]
        constant = np.all(g == g[0], axis=0) & (g[0] != IGNORE)
        if not constant.any():
            continue
        correct = np.all(p == g, axis=0) & constant
        scores.append(correct.sum() / constant.sum())
    return float(np.mean(scores)) if scores else float("nan")


def evaluate(gt_clips, pred_clips, num_classes, n_list=(8, 16)):
    """Aggregate metrics over a dataset.

    gt_clips and pred_clips are aligned lists of frame-label lists.  The
    confusion matrix is pooled over all frames; VCn averages uniformly over
    clips long enough for the window, warning about the rest.
    """
    if len(gt_clips) != len(pred_clips):
        raise EvaluationError("number of predicted clips differs from ground truth")
    cm = new_confusion(num_classes)
    for ci, (gts, preds) in enumerate(zip(gt_clips, pred_clips)):
        if len(gts) != len(preds):
            raise EvaluationError("clip %d: missing predictions (%d of %d frames)"
                                  % (ci, len(preds), len(gts)))
        for gt, pred in zip(gts, preds):
            accumulate_confusion(gt, pred, cm)

    mean_iou, ious = miou(cm)
    vc = {}
    for n in n_list:
        clip_scores = []
        for ci, (gts, preds) in enumerate(zip(gt_clips, pred_clips)):
            if len(gts) < n:
                warnings.warn("clip %d shorter than VC window %d; skipped" % (ci, n))
                continue
            score = video_consistency(gts, preds, n)
            if not np.isnan(score):
                clip_scores.append(score)
        vc[n] = float(np.mean(clip_scores)) if clip_scores else float("nan")
    return MetricReport(miou=mean_iou, weighted_iou=weighted_iou(cm),
                        per_class_iou=ious, vc=vc)
