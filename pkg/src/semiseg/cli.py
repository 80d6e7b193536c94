"""Command-line entry points.

Subcommands: gen-data, train, pseudo-gen, finetune, infer, evaluate, run-all.
Global flags --config/--seed/--out apply to every subcommand.
"""

import argparse
import os
import sys

import numpy as np

from . import formats, metrics, model, pipeline, synthdata
from .config import RunConfig, load_config
from .exceptions import SemisegError
from .inference import TtaConfig


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _dataset(cfg, path):
    if path and os.path.exists(os.path.join(path, "manifest.txt")):
        return synthdata.load_dataset(path, cfg.num_classes, cfg.seed)
    return synthdata.generate_dataset(cfg.num_classes, cfg.num_clips,
                                      cfg.frames_per_clip, cfg.height,
                                      cfg.width, cfg.labeled_fraction, cfg.seed)


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    dataset = synthdata.generate_dataset(cfg.num_classes, cfg.num_clips,
                                         cfg.frames_per_clip, cfg.height,
                                         cfg.width, cfg.labeled_fraction,
                                         cfg.seed)
    synthdata.save_dataset(dataset, args.out)
    print("wrote %d labeled + %d unlabeled clips to %s"
          % (len(dataset.labeled), len(dataset.unlabeled), args.out))


def cmd_train(args):
    cfg = _load_cfg(args)
    dataset = _dataset(cfg, args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt = pipeline.stage_supervised(cfg, args.role, dataset,
                                     os.path.join(args.out, args.role + "_loss.txt"))
    path = os.path.join(args.out, args.role + ".ckpt")
    pipeline.save_checkpoint(path, ckpt)
    print("wrote %s" % path)


def cmd_pseudo_gen(args):
    cfg = _load_cfg(args)
    dataset = _dataset(cfg, args.data)
    teacher = pipeline.load_checkpoint(args.teacher)
    student = pipeline.load_checkpoint(args.student)
    pipeline.stage_pseudolabel(cfg, teacher, student, dataset, args.out)
    print("wrote pseudo labels to %s" % args.out)


def cmd_finetune(args):
    cfg = _load_cfg(args)
    dataset = _dataset(cfg, args.data)
    student = pipeline.load_checkpoint(args.student)
    os.makedirs(args.out, exist_ok=True)
    ckpt = pipeline.stage_finetune(cfg, student, dataset, args.pseudo,
                                   os.path.join(args.out, "finetune_loss.txt"))
    path = os.path.join(args.out, "student_semi.ckpt")
    pipeline.save_checkpoint(path, ckpt)
    print("wrote %s" % path)


def cmd_infer(args):
    cfg = _load_cfg(args)
    parts = args.ensemble.split(",") if args.ensemble else []
    ckpt_paths = [p for p in parts if not _is_number(p)]
    weights = [float(p) for p in parts if _is_number(p)] or None
    if not ckpt_paths:
        ckpt_paths = [args.checkpoint]
    params_list = [pipeline.load_checkpoint(p).params for p in ckpt_paths]
    fns = [(lambda fr, p=p: model.predict_probs(p, fr)) for p in params_list]
    scales = tuple(float(s) for s in args.scales.split(",")) if args.scales \
        else tuple(cfg.tta_scales)
    tta = TtaConfig(scales=scales, flip=args.flip)

    frame = formats.read_fimg(args.frame)
    probs, labels = pipeline.predict_labels(fns, [frame], tta, weights)
    if args.out_probs:
        formats.write_pmap(args.out_probs, probs[0])
    if args.out_labels:
        formats.write_lmap(args.out_labels, labels[0], probs[0].shape[0])
    print("inferred %s (argmax histogram: %s)"
          % (args.frame, np.bincount(labels[0].ravel()).tolist()))


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    gt = synthdata.load_dataset(args.gt, cfg.num_classes, cfg.seed)
    gt_clips, pred_clips = [], []
    for clip in gt.labeled:
        gt_clips.append(clip.labels)
        preds = []
        for fi in range(len(clip.frames)):
            path = os.path.join(args.pred, clip.clip_id, "frame_%d.lmap" % fi)
            if not os.path.exists(path):
                print("missing prediction: %s" % path, file=sys.stderr)
                sys.exit(2)
            labels, _ = formats.read_lmap(path)
            preds.append(labels)
        pred_clips.append(preds)
    report = metrics.evaluate(gt_clips, pred_clips, gt.num_classes)
    csv = pipeline.metrics_csv({"model": report})
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
    print(csv, end="")


def cmd_run_all(args):
    cfg = _load_cfg(args)
    reports = pipeline.run_all(cfg, args.out)
    for name in sorted(reports):
        r = reports[name]
        print("%s: miou=%.4f weighted_iou=%.4f vc8=%.4f vc16=%.4f"
              % (name, r.miou, r.weighted_iou, r.vc8, r.vc16))


def build_parser():
    parser = argparse.ArgumentParser(prog="semiseg")
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="supervised training of one model")
    p.add_argument("--role", choices=("teacher", "student"), required=True)
    p.add_argument("--data", help="dataset directory (generated if absent)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-gen", help="generate entropy-filtered pseudo labels")
    p.add_argument("--data")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_gen)

    p = sub.add_parser("finetune", help="fine-tune the student on pseudo labels")
    p.add_argument("--data")
    p.add_argument("--student", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="TTA / ensemble inference on one frame")
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble", help="ckpt1,ckpt2[,w1,w2]")
    p.add_argument("--frame", required=True, help=".fimg input")
    p.add_argument("--scales", help="comma-separated scale ratios")
    p.add_argument("--flip", action="store_true")
    p.add_argument("--out-probs")
    p.add_argument("--out-labels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against a dataset")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--pred", required=True, help="predicted .lmap directory")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="full three-stage pipeline + evaluation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SemisegError as exc:
        print("error: %s" % exc, file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
