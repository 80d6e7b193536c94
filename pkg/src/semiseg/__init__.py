"""semiseg: semi-supervised video semantic segmentation at desk scale.

Synthetic moving-shape video data, a small convnet with handwritten
backprop, entropy-filtered pseudo labels that recycle unreliable pixels as
contrastive negatives, multi-scale/flip test-time augmentation with model
ensembling, and mIoU / weighted IoU / video-consistency evaluation.
"""

__version__ = "0.1.0"
