"""Test-time augmentation and model ensembling.

Predictions are averaged over multiple input scales, optionally with a
horizontal flip at each scale, and over multiple models.  Fusion is an
arithmetic mean of probability maps; means of valid probability maps stay
normalized to machine precision, so no renormalization step is applied and
single-member fusion is an exact passthrough.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError, ValidationError

# The full-scale multi-scale ratios (relative to a 896 base side); desk-scale
# configs usually truncate this list.
FULL_SCALES = (512.0 / 896.0, 640.0 / 896.0, 768.0 / 896.0, 1.0,
               1024.0 / 896.0, 1152.0 / 896.0, 1280.0 / 896.0, 1408.0 / 896.0)


@dataclass
class TtaConfig:
    scales: tuple = (1.0,)
    flip: bool = True


def resize_bilinear(arr, out_h, out_w):
    """Channelwise bilinear resize with half-pixel centers, clamped edges."""
    arr = np.asarray(arr, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ParameterError("target size must be positive")
    c, h, w = arr.shape
    if (out_h, out_w) == (h, w):
        return arr

    src_y = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    src_x = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0)[None, :, None]
    fx = (src_x - x0)[None, None, :]

    top = arr[:, y0][:, :, x0] * (1 - fx) + arr[:, y0][:, :, x1] * fx
    bot = arr[:, y1][:, :, x0] * (1 - fx) + arr[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def hflip(arr):
    """Reverse the width (last) axis; an involution."""
    return np.ascontiguousarray(np.asarray(arr)[..., ::-1])


def tta_predict(predict_fn, frame, cfg):
    """Fused prediction over scales and flips.

    predict_fn maps a (3,h,w) frame to a (C,h,w) probability map.  Each run
    is resized back to the frame's base size; runs are averaged in scale
    order (unflipped before flipped at each scale).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if not cfg.scales:
        raise ParameterError("scale list must be nonempty")
    _, h, w = frame.shape
    runs = []
    for s in cfg.scales:
        sh, sw = max(1, int(np.floor(s * h))), max(1, int(np.floor(s * w)))
        scaled = resize_bilinear(frame, sh, sw)
        runs.append(resize_bilinear(predict_fn(scaled), h, w))
        if cfg.flip:
            flipped = predict_fn(hflip(scaled))
            runs.append(resize_bilinear(hflip(flipped), h, w))
    if len(runs) == 1:
        return runs[0]
    acc = runs[0]
    for r in runs[1:]:
        acc = acc + r
    return acc / len(runs)


def ensemble(maps, weights=None):
    """Weighted mean of probability maps (uniform by default)."""
    if not maps:
        raise ValidationError("need at least one probability map")
    shape = np.asarray(maps[0]).shape
    for m in maps:
        if np.asarray(m).shape != shape:
            raise ValidationError("probability map shapes differ")
    if weights is None:
        weights = np.ones(len(maps))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(maps),) or np.any(weights < 0) or weights.sum() == 0:
        raise ValidationError("weights must be nonnegative and not all zero")
    weights = weights / weights.sum()
    acc = weights[0] * np.asarray(maps[0], dtype=np.float64)
    for wgt, m in zip(weights[1:], maps[1:]):
        acc = acc + wgt * np.asarray(m, dtype=np.float64)
    return acc
