"""
Recycling unreliable pixels as contrastive negatives
====================================================

Pixels whose prediction entropy is too high are excluded from the
cross-entropy loss — but they still carry signal.  If the model thinks a
pixel is *not* class c (c is outside its top-k most probable classes), that
pixel's embedding makes a good negative for class c's contrastive term.

This demo builds the contrastive structure for one batch and walks through
its parts: anchors, the class prototype, and the sampled negatives.
"""

import numpy as np

from semiseg import model, pipeline, synthdata
from semiseg.config import RunConfig
from semiseg.losses import contrastive_loss

cfg = RunConfig(num_classes=4, num_clips=6, frames_per_clip=4,
                height=24, width=24, crop=24, labeled_fraction=0.34,
                student_width=8, embed_dim=8, iterations_supervised=100,
                top_k_exclusion=2, anchors_per_class=8,
                negatives_per_anchor=16, min_prob=0.2, seed=1)

dataset = synthdata.generate_dataset(cfg.num_classes, cfg.num_clips,
                                     cfg.frames_per_clip, cfg.height,
                                     cfg.width, cfg.labeled_fraction, cfg.seed)
student = pipeline.stage_supervised(cfg, "student", dataset)

# One labeled frame (anchor source) and two unlabeled frames (negative
# source), traced through the model so we have logits and embeddings.
lclip = dataset.labeled[0]
uclip = dataset.unlabeled[0]
lab_traces = [model.forward(student.params, lclip.frames[0])]
unl_traces = [model.forward(student.params, f) for f in uclip.frames[:2]]

rng = np.random.default_rng(0)
anchor_refs, neg_refs, gamma, n_rel, n_unrel = (
    pipeline.select_contrastive_structure(cfg, lab_traces, [lclip.labels[0]],
                                          unl_traces, 0.2, rng))
print("entropy threshold gamma = %.3f" % gamma)
print("unlabeled pixels: %d reliable, %d unreliable (recycled as negatives)"
      % (n_rel, n_unrel))
for c in sorted(anchor_refs):
    print("class %d: %d anchors, %d negatives per anchor"
          % (c, anchor_refs[c].shape[0], neg_refs[c].shape[1]))

# Gather the current embeddings at those frozen pixel choices and evaluate
# the InfoNCE loss: each anchor should sit near its class prototype (the
# normalized mean of the anchors) and away from every negative.
batch = pipeline.build_contrastive_batch(cfg, lab_traces + unl_traces,
                                         anchor_refs, neg_refs)
loss, _ = contrastive_loss(batch)
print()
print("contrastive loss of this batch: %.4f" % loss)

for c, cc in sorted(batch.classes.items()):
    pos = float(np.mean(cc.anchors @ cc.prototype))
    if cc.negatives.size:
        neg = float(np.mean(np.einsum("md,mnd->mn", cc.anchors, cc.negatives)))
        print("class %d: mean anchor-prototype similarity %+.3f, "
              "mean anchor-negative similarity %+.3f" % (c, pos, neg))

print()
print("Training with this loss pushes the positive similarities toward +1 "
      "and the negative ones down, giving the unreliable pixels a useful "
      "role instead of discarding them.")
