"""Synthetic moving-shape video clips with per-pixel class labels.

Each clip shows num_classes-1 textured shapes translating over a background
(class 0) with constant per-clip velocity and reflective boundaries, so
consecutive frames are temporally coherent and video-consistency metrics are
meaningful.  Label maps use 255 as the ignore sentinel.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import formats
from .exceptions import MappingError, ParameterError

IGNORE = 255
NOISE_SIGMA = 0.08


@dataclass
class Clip:
    clip_id: str
    frames: list            # list of (3,H,W) float arrays in [0,1]
    labels: Optional[list]  # list of (H,W) uint8 arrays, or None if unlabeled


@dataclass
class ClipDataset:
    labeled: list
    unlabeled: list
    num_classes: int
    seed: int

    @property
    def clips(self):
        return self.labeled + self.unlabeled


@dataclass
class AugmentConfig:
    ratio_range: tuple = (0.5, 2.0)
    crop_hw: Optional[tuple] = None   # None: crop to the original size
    flip_prob: float = 0.5
    jitter: bool = True
    jitter_scale: tuple = (0.9, 1.1)
    jitter_shift: tuple = (-0.05, 0.05)


def _fold(x, lo, hi):
    """Reflect x into [lo, hi] (triangular wave), for bouncing motion."""
    span = hi - lo
    if span <= 0:
        return lo
    y = (x - lo) % (2.0 * span)
    return lo + (span - abs(y - span))


def _shape_mask(kind, cy, cx, size, yy, xx):
    if kind == 0:    # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if kind == 1:    # rectangle
        return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 0.7 * size)
    if kind == 2:    # triangle (downward-pointing half planes)
        return (
            (yy >= cy - size)
            & (yy - cy <= 2.0 * (xx - cx) + size)
            & (yy - cy <= -2.0 * (xx - cx) + size)
        )
    # diagonal stripe band
    return np.abs((yy - cy) + (xx - cx)) <= 0.8 * size


def generate_dataset(num_classes, num_clips, frames_per_clip, height, width,
                     labeled_fraction, seed):
    """Deterministic synthetic video dataset.

    Frame synthesis depends only on (num_classes, num_clips, frames_per_clip,
    height, width, seed); labeled_fraction only decides how many clips keep
    their label maps, so regenerating with labeled_fraction=1.0 recovers
    ground truth for every clip.
    """
    if not (2 <= num_classes <= 16):
        raise ParameterError("num_classes must be in [2,16], got %r" % num_classes)
    if not (0.0 < labeled_fraction <= 1.0):
        raise ParameterError("labeled_fraction must be in (0,1], got %r" % labeled_fraction)
    if height < 16 or width < 16:
        raise ParameterError("dimensions must be >= 16")
    if num_clips < 1 or frames_per_clip < 1:
        raise ParameterError("num_clips and frames_per_clip must be positive")

    rng = np.random.default_rng(seed)
    # Base palette: a fixed function of the class count (not the seed), so
    # differently seeded datasets agree on what each class looks like; colors
    # are close enough that the per-pixel noise makes classification
    # non-trivial.
    palette = 0.2 + 0.6 * np.random.default_rng(170 + num_classes).random((num_classes, 3))

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    n_labeled = int(np.ceil(labeled_fraction * num_clips))
    labeled, unlabeled = [], []

    for ci in range(num_clips):
        shapes = []
        for cls in range(1, num_classes):
            size = rng.uniform(0.08, 0.22) * min(height, width)
            shapes.append({
                "cls": cls,
                "kind": int(rng.integers(0, 4)),
                "size": size,
                "y0": rng.uniform(size, height - size),
                "x0": rng.uniform(size, width - size),
                "vy": rng.uniform(-2.5, 2.5),
                "vx": rng.uniform(-2.5, 2.5),
                "tex_freq": rng.uniform(0.2, 0.9),
                "tex_phase": rng.uniform(0.0, 2 * np.pi),
            })
        bg_freq = rng.uniform(0.05, 0.2)

        frames, labels = [], []
        for t in range(frames_per_clip):
            label = np.zeros((height, width), dtype=np.uint8)
            frame = np.empty((3, height, width))
            bg_tex = 0.05 * np.sin(bg_freq * (yy + xx))
            for ch in range(3):
                frame[ch] = palette[0, ch] + bg_tex
            for sh in shapes:
                cy = _fold(sh["y0"] + sh["vy"] * t, sh["size"], height - sh["size"])
                cx = _fold(sh["x0"] + sh["vx"] * t, sh["size"], width - sh["size"])
                mask = _shape_mask(sh["kind"], cy, cx, sh["size"], yy, xx)
                tex = 0.08 * np.sin(sh["tex_freq"] * (yy + 0.5 * xx) + sh["tex_phase"])
                for ch in range(3):
                    frame[ch][mask] = palette[sh["cls"], ch] + tex[mask]
                label[mask] = sh["cls"]
            frame += rng.normal(0.0, NOISE_SIGMA, frame.shape)
            np.clip(frame, 0.0, 1.0, out=frame)
            frames.append(frame)
            labels.append(label)

        clip_id = "clip_%03d" % ci
        if ci < n_labeled:
            labeled.append(Clip(clip_id, frames, labels))
        else:
            unlabeled.append(Clip(clip_id, frames, None))

    return ClipDataset(labeled, unlabeled, num_classes, seed)


def remap_labels(labels, table):
    """Apply an old-class -> new-class mapping; 255 always maps to 255."""
    labels = np.asarray(labels)
    present = np.unique(labels)
    missing = [int(v) for v in present if v != IGNORE and int(v) not in table]
    if missing:
        raise MappingError("remap table missing class ids %s" % missing)
    out = np.full_like(labels, IGNORE)
    for old, new in table.items():
        out[labels == old] = new
    return out


def _resize_nearest_labels(labels, out_h, out_w):
    h, w = labels.shape
    src_y = np.clip(np.round((np.arange(out_h) + 0.5) * (h / out_h) - 0.5), 0, h - 1).astype(int)
    src_x = np.clip(np.round((np.arange(out_w) + 0.5) * (w / out_w) - 0.5), 0, w - 1).astype(int)
    return labels[np.ix_(src_y, src_x)]


def augment(frame, label, params, rng):
    """Random resize, crop, horizontal flip and color jitter.

    The same geometric transform is applied to the frame and to the label map
    (bilinear vs nearest interpolation); padding introduced by a small resize
    uses value 0 for pixels and 255 for labels.
    """
    from .inference import resize_bilinear, hflip

    frame = np.asarray(frame)
    _, h, w = frame.shape
    crop_h, crop_w = params.crop_hw if params.crop_hw is not None else (h, w)

    r = rng.uniform(params.ratio_range[0], params.ratio_range[1])
    new_h, new_w = max(1, int(np.floor(r * h))), max(1, int(np.floor(r * w)))
    if (new_h, new_w) != (h, w):
        frame = resize_bilinear(frame, new_h, new_w)
        if label is not None:
            label = _resize_nearest_labels(label, new_h, new_w)

    if new_h < crop_h or new_w < crop_w:
        pad_h, pad_w = max(0, crop_h - new_h), max(0, crop_w - new_w)
        frame = np.pad(frame, ((0, 0), (0, pad_h), (0, pad_w)))
        if label is not None:
            label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=IGNORE)
        new_h, new_w = max(new_h, crop_h), max(new_w, crop_w)

    oy = int(rng.integers(0, new_h - crop_h + 1))
    ox = int(rng.integers(0, new_w - crop_w + 1))
    frame = frame[:, oy:oy + crop_h, ox:ox + crop_w]
    if label is not None:
        label = label[oy:oy + crop_h, ox:ox + crop_w]

    if rng.random() < params.flip_prob:
        frame = hflip(frame)
        if label is not None:
            label = label[:, ::-1]

    if params.jitter:
        scale = rng.uniform(*params.jitter_scale, size=(3, 1, 1))
        shift = rng.uniform(*params.jitter_shift, size=(3, 1, 1))
        frame = np.clip(frame * scale + shift, 0.0, 1.0)

    if label is not None:
        label = np.ascontiguousarray(label)
    return np.ascontiguousarray(frame), label


def save_dataset(dataset, out_dir):
    """Persist a dataset as clips/<id>/frame_<k>.{fimg,lmap} + manifest.txt."""
    clips_dir = os.path.join(out_dir, "clips")
    os.makedirs(clips_dir, exist_ok=True)
    lines = []
    for clip in dataset.clips:
        cdir = os.path.join(clips_dir, clip.clip_id)
        os.makedirs(cdir, exist_ok=True)
        for k, frame in enumerate(clip.frames):
            formats.write_fimg(os.path.join(cdir, "frame_%d.fimg" % k), frame)
            if clip.labels is not None:
                formats.write_lmap(os.path.join(cdir, "frame_%d.lmap" % k),
                                   clip.labels[k], dataset.num_classes)
        kind = "labeled" if clip.labels is not None else "unlabeled"
        lines.append("%s %s %d\n" % (clip.clip_id, kind, len(clip.frames)))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.writelines(lines)


def load_dataset(in_dir, num_classes=None, seed=0):
    """Load a dataset previously written by save_dataset."""
    labeled, unlabeled = [], []
    with open(os.path.join(in_dir, "manifest.txt")) as fh:
        for line in fh:
            clip_id, kind, n = line.split()
            cdir = os.path.join(in_dir, "clips", clip_id)
            frames, labels = [], []
            for k in range(int(n)):
                frames.append(formats.read_fimg(os.path.join(cdir, "frame_%d.fimg" % k)))
                if kind == "labeled":
                    lab, nc = formats.read_lmap(os.path.join(cdir, "frame_%d.lmap" % k))
                    labels.append(lab)
                    num_classes = nc if num_classes is None else num_classes
            if kind == "labeled":
                labeled.append(Clip(clip_id, frames, labels))
            else:
                unlabeled.append(Clip(clip_id, frames, None))
    if num_classes is None:
        raise ParameterError("num_classes unknown: dataset has no labeled clips")
    return ClipDataset(labeled, unlabeled, num_classes, seed)
