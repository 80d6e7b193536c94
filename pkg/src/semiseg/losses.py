"""The three-term training objective and its analytic gradients.

Total loss = supervised CE + lambda_u * pseudo-label CE + lambda_c *
contrastive loss.  Cross-entropy terms average per image over non-ignored
pixels, then over the batch.  The contrastive term is InfoNCE over per-class
anchors, a normalized-mean prototype as the positive, and sampled unreliable
pixels as negatives.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ParameterError, ValidationError
from .model import softmax
from .synthdata import IGNORE


@dataclass
class ClassContrast:
    anchors: np.ndarray             # (M,d) unit rows
    prototype: np.ndarray           # (d,) unit
    negatives: np.ndarray           # (M,N,d) unit rows; N may be 0
    anchor_refs: Optional[np.ndarray] = None   # (M,3) of (frame,row,col)
    neg_refs: Optional[np.ndarray] = None      # (M,N,3)


@dataclass
class ContrastiveBatch:
    classes: dict                   # class id -> ClassContrast
    temperature: float


@dataclass
class LossReport:
    total: float
    ls: float
    lu: float
    lc: float
    lambda_u: float
    lambda_c: float
    n_sup_pixels: int = 0
    n_unsup_pixels: int = 0
    n_anchors: int = 0


def supervised_ce(logits_list, labels_list):
    """Mean cross-entropy over non-255 pixels, per image then per batch.

    Returns (loss, per-image gradient list, contributing pixel count).  The
    gradient at a contributing pixel is (softmax - onehot) / (n_i * B);
    images without any valid pixel contribute zero.
    """
    if isinstance(logits_list, np.ndarray) and logits_list.ndim == 3:
        logits_list, labels_list = [logits_list], [labels_list]
    batch = len(logits_list)
    if batch == 0:
        return 0.0, [], 0

    loss = 0.0
    grads = []
    total_pixels = 0
    for logits, labels in zip(logits_list, labels_list):
        logits = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels)
        if logits.shape[1:] != labels.shape:
            raise ValidationError("logits/labels shape mismatch")
        valid = labels != IGNORE
        n = int(valid.sum())
        grad = np.zeros_like(logits)
        if n > 0:
            probs = softmax(logits, axis=0)
            ys, xs = np.nonzero(valid)
            cls = labels[ys, xs].astype(np.int64)
            p_true = probs[cls, ys, xs]
            loss += -np.sum(np.log(p_true)) / n / batch
            grad[:, ys, xs] = probs[:, ys, xs] / (n * batch)
            grad[cls, ys, xs] -= 1.0 / (n * batch)
            total_pixels += n
        grads.append(grad)
    return float(loss), grads, total_pixels


def unsupervised_ce(logits_list, pseudo_list):
    """Cross-entropy against pseudo labels; 255 pixels contribute nothing."""
    if not isinstance(pseudo_list, (list, tuple)):
        pseudo_list = [pseudo_list]
        logits_list = [logits_list]
    labels = [p.labels if hasattr(p, "labels") else p for p in pseudo_list]
    return supervised_ce(logits_list, labels)


def contrastive_loss(batch):
    """InfoNCE over anchors against prototype (positive) and negatives.

    Loss = -mean over all anchors of
      log[ exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau)) ]
    with s+ = <anchor, prototype>, s-_j = <anchor, negative_j>.

    Returns (loss, {class: (d_anchors, d_prototype, d_negatives)}).
    """
    if batch.temperature <= 0.0:
        raise ParameterError("temperature must be > 0")
    tau = batch.temperature
    total_anchors = sum(cc.anchors.shape[0] for cc in batch.classes.values())
    if total_anchors == 0:
        return 0.0, {}

    loss = 0.0
    grads = {}
    for c, cc in batch.classes.items():
        anchors, proto, negs = cc.anchors, cc.prototype, cc.negatives
        m, d = anchors.shape
        s_pos = anchors @ proto                          # (M,)
        if negs.size:
            s_neg = np.einsum("md,mnd->mn", anchors, negs)   # (M,N)
            # log(1 + sum_j exp((s-_j - s+)/tau)), stably.
            z = (s_neg - s_pos[:, None]) / tau
            zmax = np.maximum(np.max(z, axis=1), 0.0)
            lse = zmax + np.log(np.exp(-zmax) + np.sum(np.exp(z - zmax[:, None]), axis=1))
        else:
            s_neg = np.zeros((m, 0))
            lse = np.zeros(m)
        loss += float(np.sum(lse)) / total_anchors

        # Softmax over [positive, negatives]: p0 + sum_j pj = 1.
        p0 = np.exp(-lse)                                # (M,)
        d_spos = (p0 - 1.0) / (tau * total_anchors)      # (M,)
        d_anchors = d_spos[:, None] * proto[None, :]
        d_proto = d_spos @ anchors
        if negs.size:
            pj = np.exp((s_neg - s_pos[:, None]) / tau - lse[:, None])
            d_sneg = pj / (tau * total_anchors)          # (M,N)
            d_anchors = d_anchors + np.einsum("mn,mnd->md", d_sneg, negs)
            d_negs = d_sneg[:, :, None] * anchors[:, None, :]
        else:
            d_negs = np.zeros_like(negs)
        grads[c] = (d_anchors, d_proto, d_negs)
    return float(loss), grads


def total_loss(ls, lu, lc, lambda_u, lambda_c, n_sup_pixels=0,
               n_unsup_pixels=0, n_anchors=0):
    if lambda_u < 0.0 or lambda_c < 0.0:
        raise ParameterError("loss weights must be nonnegative")
    total = ls + lambda_u * lu + lambda_c * lc
    return LossReport(total=float(total), ls=float(ls), lu=float(lu),
                      lc=float(lc), lambda_u=float(lambda_u),
                      lambda_c=float(lambda_c), n_sup_pixels=n_sup_pixels,
                      n_unsup_pixels=n_unsup_pixels, n_anchors=n_anchors)


def scatter_embedding_grads(batch, grads, n_frames, emb_shape):
    """Route contrastive gradients back to per-frame embedding maps.

    The prototype is the normalized mean of the class's anchors, so its
    gradient flows through the normalize-of-mean Jacobian onto the anchors;
    anchor and negative gradients accumulate directly at their referenced
    pixels.  Returns a list of n_frames (d,H,W) arrays.
    """
    maps = [np.zeros(emb_shape) for _ in range(n_frames)]
    for c, (d_anchors, d_proto, d_negs) in grads.items():
        cc = batch.classes[c]
        if cc.anchor_refs is None:
            raise ValidationError("class %r has no pixel references" % c)
        m = cc.anchors.shape[0]
        mean = cc.anchors.mean(axis=0)
        norm = np.linalg.norm(mean)
        # d(mean/|mean|)/dmean applied to the prototype gradient.
        d_mean = (d_proto - cc.prototype * float(cc.prototype @ d_proto)) / norm
        d_anchors = d_anchors + d_mean[None, :] / m
        for i, (fi, y, x) in enumerate(cc.anchor_refs):
            maps[fi][:, y, x] += d_anchors[i]
        if cc.neg_refs is not None and cc.neg_refs.size:
            for i in range(m):
                for j, (fi, y, x) in enumerate(cc.neg_refs[i]):
                    maps[fi][:, y, x] += d_negs[i, j]
    return maps


def format_log_line(iteration, report, gamma_t, n_reliable, n_unreliable):
    """One training-log line: iter L Ls Lu Lc gamma_t n_reliable n_unreliable."""
    return "%d %r %r %r %r %r %d %d" % (
        iteration, report.total, report.ls, report.lu, report.lc,
        float(gamma_t), n_reliable, n_unreliable)


def parse_log_line(line):
    parts = line.split()
    if len(parts) != 8:
        raise ValidationError("bad log line: %r" % line)
    return (int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]),
            float(parts[4]), float(parts[5]), int(parts[6]), int(parts[7]))
