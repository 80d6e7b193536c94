"""Entropy-filtered pseudo labels and unreliable-pixel recycling.

A pixel is reliable when its prediction entropy is strictly below the batch
threshold; unreliable pixels get the 255 ignore label and are reused as
contrastive negatives for the classes they are least likely to belong to.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, ValidationError
from .synthdata import IGNORE

PROB_SUM_TOL = 1e-6


@dataclass
class PseudoLabelMap:
    labels: np.ndarray       # (H,W) uint8, 255 where unreliable
    threshold_used: float


def entropy_map(probs):
    """Per-pixel natural-log entropy of a (C,H,W) probability map."""
    probs = np.asarray(probs, dtype=np.float64)
    sums = probs.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > PROB_SUM_TOL:
        raise ValidationError("probabilities do not sum to 1 per pixel")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=0)


def threshold_gamma(entropies, drop_fraction):
    """Entropy threshold leaving ~drop_fraction of pixels unreliable.

    The (1 - drop_fraction) empirical quantile (linear interpolation between
    order statistics) of all entropy values; entropies may be one map or a
    list of maps.  A pixel is unreliable iff its entropy >= the threshold.
    """
    if not (0.0 < drop_fraction < 1.0):
        raise ParameterError("drop_fraction must be in (0,1)")
    if isinstance(entropies, (list, tuple)):
        flat = np.concatenate([np.ravel(e) for e in entropies]) if entropies else np.array([])
    else:
        flat = np.ravel(entropies)
    if flat.size == 0:
        raise ParameterError("no entropy values to threshold")
    return float(np.quantile(flat, 1.0 - drop_fraction))


def make_pseudo_labels(probs, entropies, gamma):
    """Argmax labels where entropy < gamma, 255 elsewhere.

    Argmax ties break toward the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    entropies = np.asarray(entropies, dtype=np.float64)
    if probs.shape[1:] != entropies.shape:
        raise ValidationError("probs/entropies shape mismatch")
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    labels[entropies >= gamma] = IGNORE
    return PseudoLabelMap(labels=labels, threshold_used=float(gamma))


def select_negatives(probs, pseudo, top_k_exclusion, per_class_cap, rng):
    """Sample unreliable pixels as per-class negative candidates.

    For each class c, candidates are unreliable pixels (pseudo label 255)
    where c is not among the pixel's top_k_exclusion most probable classes;
    up to per_class_cap are drawn uniformly without replacement.  Returns
    {class: (n,2) array of (row, col) indices}.
    """
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[0]
    if top_k_exclusion >= num_classes:
        raise ParameterError("top_k_exclusion must be < num_classes")
    unreliable = pseudo.labels == IGNORE
    ys, xs = np.nonzero(unreliable)
    out = {}
    if ys.size == 0:
        return {c: np.empty((0, 2), dtype=np.int64) for c in range(num_classes)}

    pix = probs[:, ys, xs]                       # (C, n)
    # Rank classes per pixel, descending probability, ties by class index.
    order = np.argsort(-pix, axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(num_classes)[:, None], axis=0)
    for c in range(num_classes):
        mask = rank[c] >= top_k_exclusion
        idx = np.nonzero(mask)[0]
        if idx.size > per_class_cap:
            idx = idx[_fisher_yates_take(idx.size, per_class_cap, rng)]
        out[c] = np.stack([ys[idx], xs[idx]], axis=1)
    return out


def _fisher_yates_take(n, k, rng):
    """Indices of k items drawn uniformly without replacement from range(n)."""
    pool = np.arange(n)
    for i in range(k):
        j = int(rng.integers(i, n))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def sample_anchors(embeddings, labels, probs, per_class, min_prob, rng):
    """Per-class anchor embeddings plus a normalized-mean prototype.

    embeddings/labels/probs may each be a single map or a list of aligned
    maps; anchors for class c come from pixels labeled c (never 255) whose
    predicted probability for c exceeds min_prob.  Up to per_class anchors
    are drawn without replacement.  Classes with no qualifying pixel, or a
    degenerate (zero-norm) prototype, are skipped.

    Returns {class: (anchor_embs (M,d), refs (M,3) of (frame,row,col),
    prototype (d,))}.
    """
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    if not isinstance(embeddings, (list, tuple)):
        embeddings, labels, probs = [embeddings], [labels], [probs]
    num_classes = np.asarray(probs[0]).shape[0]

    cand_refs = {c: [] for c in range(num_classes)}
    for fi, (emb, lab, prob) in enumerate(zip(embeddings, labels, probs)):
        lab = np.asarray(lab)
        for c in range(num_classes):
            ys, xs = np.nonzero((lab == c) & (prob[c] > min_prob))
            if ys.size:
                cand_refs[c].append(np.stack([np.full(ys.size, fi), ys, xs], axis=1))

    out = {}
    for c in range(num_classes):
        if not cand_refs[c]:
            continue
        refs = np.concatenate(cand_refs[c], axis=0)
        take = min(per_class, refs.shape[0])
        refs = refs[_fisher_yates_take(refs.shape[0], take, rng)]
        anchors = np.stack(
            [embeddings[fi][:, y, x] for fi, y, x in refs], axis=0
        )
        mean = anchors.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 1e-12:
            continue
        out[c] = (anchors, refs, mean / norm)
    return out
