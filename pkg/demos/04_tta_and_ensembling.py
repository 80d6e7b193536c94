"""
Test-time augmentation and model ensembling
===========================================

At inference time each frame can be predicted at several scales, with a
horizontal flip at every scale, and by several models; all of the resulting
probability maps are averaged.  Averaging valid probability maps yields a
valid probability map, and the degenerate cases are exact: a single scale
without flip is a bit-identical passthrough, and ensembling a model with
itself returns its own prediction bit for bit.
"""

import numpy as np

from semiseg import model, pipeline, synthdata
from semiseg.config import RunConfig
from semiseg.inference import TtaConfig, ensemble, tta_predict
from semiseg.metrics import accumulate_confusion, miou, new_confusion

cfg = RunConfig(num_classes=4, num_clips=10, frames_per_clip=6,
                height=32, width=32, crop=32, labeled_fraction=0.2,
                teacher_width=16, student_width=8,
                iterations_supervised=500, seed=0)

dataset = synthdata.generate_dataset(cfg.num_classes, cfg.num_clips,
                                     cfg.frames_per_clip, cfg.height,
                                     cfg.width, cfg.labeled_fraction, cfg.seed)
teacher = pipeline.stage_supervised(cfg, "teacher", dataset)
student = pipeline.stage_supervised(cfg, "student", dataset)
t_fn = lambda fr: model.predict_probs(teacher.params, fr)
s_fn = lambda fr: model.predict_probs(student.params, fr)

# Exactness of the degenerate cases.
frame = dataset.unlabeled[0].frames[0]
direct = t_fn(frame)
passthrough = tta_predict(t_fn, frame, TtaConfig(scales=(1.0,), flip=False))
print("single-scale, no-flip TTA identical to direct inference:",
      np.array_equal(passthrough, direct))
print("self-ensemble identical to the single model:",
      np.array_equal(ensemble([direct, direct.copy()]), direct))

# Score a few evaluation clips under different inference settings.
eval_ds = synthdata.generate_dataset(cfg.num_classes, 4, 8, cfg.height,
                                     cfg.width, 1.0, cfg.seed + 9001)

settings = [
    ("student, plain", [s_fn], TtaConfig(scales=(1.0,), flip=False)),
    ("student, flip TTA", [s_fn], TtaConfig(scales=(1.0,), flip=True)),
    ("student, 3 scales + flip", [s_fn],
     TtaConfig(scales=(0.75, 1.0, 1.25), flip=True)),
    ("teacher, plain", [t_fn], TtaConfig(scales=(1.0,), flip=False)),
    ("teacher+student ensemble", [t_fn, s_fn],
     TtaConfig(scales=(1.0,), flip=True)),
]

for name, fns, tta in settings:
    cm = new_confusion(cfg.num_classes)
    for clip in eval_ds.labeled:
        _, labels = pipeline.predict_labels(fns, clip.frames, tta)
        for gt, pred in zip(clip.labels, labels):
            accumulate_confusion(gt, pred, cm)
    print("%-26s mIoU %.4f" % (name, miou(cm)[0]))

print()
print("Flip and multi-scale averaging smooth out single-view mistakes, and "
      "the ensemble blends the teacher's accuracy with the student's view.")
