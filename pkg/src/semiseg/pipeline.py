"""Three-stage training pipeline.

Stage A trains a wide teacher and a narrow student on the labeled clips.
Stage B fuses TTA predictions of both models over the unlabeled clips and
writes entropy-filtered pseudo labels (generated once, offline; the teacher
stays frozen afterwards).  Stage C fine-tunes the student on labeled plus
pseudo-labeled data with the combined loss, re-splitting reliable/unreliable
pixels online from the current student probabilities for the contrastive
term.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import formats, losses, metrics, model, pseudolabel, synthdata
from .exceptions import ConfigError, FormatError, PipelineError
from .inference import TtaConfig, ensemble, tta_predict
from .synthdata import IGNORE, AugmentConfig


@dataclass
class Checkpoint:
    params: dict
    optim: "model.OptimizerState"
    iteration: int
    config_hash: int


def save_checkpoint(path, ckpt):
    param_entries = [(name, ckpt.params[name]) for name in model.PARAM_NAMES]
    st = ckpt.optim
    optim_entries = (
        [("m:" + name, st.m[name]) for name in model.PARAM_NAMES]
        + [("v:" + name, st.v[name]) for name in model.PARAM_NAMES]
        + [("t", np.float64(st.t)), ("lr", np.float64(st.lr)),
           ("beta1", np.float64(st.beta1)), ("beta2", np.float64(st.beta2)),
           ("eps", np.float64(st.eps)),
           ("weight_decay", np.float64(st.weight_decay)),
           ("warmup_steps", np.float64(st.warmup_steps))]
    )
    formats.write_ckpt(path, ckpt.config_hash, param_entries, optim_entries,
                       ckpt.iteration)


def load_checkpoint(path, expect_hash=None):
    config_hash, param_entries, optim_entries, iteration = formats.read_ckpt(path)
    if expect_hash is not None and config_hash != expect_hash:
        raise FormatError("checkpoint config hash mismatch")
    params = dict(param_entries)
    opt = dict(optim_entries)
    state = model.OptimizerState(
        m={n: opt["m:" + n] for n in model.PARAM_NAMES},
        v={n: opt["v:" + n] for n in model.PARAM_NAMES},
        t=int(opt["t"]), lr=float(opt["lr"]), beta1=float(opt["beta1"]),
        beta2=float(opt["beta2"]), eps=float(opt["eps"]),
        weight_decay=float(opt["weight_decay"]),
        warmup_steps=int(opt["warmup_steps"]))
    return Checkpoint(params=params, optim=state, iteration=iteration,
                      config_hash=config_hash)


def _augment_config(cfg):
    return AugmentConfig(ratio_range=(cfg.augment_ratio_min, cfg.augment_ratio_max),
                         crop_hw=(cfg.crop, cfg.crop))


def _labeled_frame_index(dataset):
    return [(ci, fi) for ci, clip in enumerate(dataset.labeled)
            for fi in range(len(clip.frames))]


def _make_model(cfg, role, seed_offset):
    width = cfg.teacher_width if role == "teacher" else cfg.student_width
    params = model.init_params(width, cfg.num_classes, cfg.embed_dim,
                               cfg.seed + seed_offset)
    state = model.init_optimizer(params, lr=cfg.lr, beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.eps,
                                 weight_decay=cfg.weight_decay,
                                 warmup_steps=cfg.warmup_steps)
    return params, state


def stage_supervised(cfg, role, dataset, log_path=None):
    """Stage A: train one model on the labeled clips with cross-entropy."""
    if role not in ("teacher", "student"):
        raise ConfigError("role must be 'teacher' or 'student'")
    if not dataset.labeled:
        raise ConfigError("no labeled clips available")
    params, state = _make_model(cfg, role, 1 if role == "teacher" else 2)
    rng = np.random.default_rng(cfg.seed + (101 if role == "teacher" else 102))
    frames_index = _labeled_frame_index(dataset)
    aug = _augment_config(cfg)
    log_lines = []

    for it in range(cfg.iterations_supervised):
        picks = rng.integers(0, len(frames_index), size=cfg.batch_size)
        batch_logits, batch_labels, traces = [], [], []
        for p in picks:
            ci, fi = frames_index[p]
            clip = dataset.labeled[ci]
            frame, label = synthdata.augment(clip.frames[fi], clip.labels[fi], aug, rng)
            trace = model.forward(params, frame)
            traces.append(trace)
            batch_logits.append(trace.logits)
            batch_labels.append(label)
        ls, grads_logits, n_pix = losses.supervised_ce(batch_logits, batch_labels)
        total = model.zero_like_params(params)
        for trace, dlog in zip(traces, grads_logits):
            g = model.backward(trace, dlog, None)
            for name in total:
                total[name] += g[name]
        params, state = model.adamw_step(params, total, state)
        report = losses.total_loss(ls, 0.0, 0.0, cfg.lambda_u, cfg.lambda_c,
                                   n_sup_pixels=n_pix)
        log_lines.append(losses.format_log_line(it, report, 0.0, n_pix, 0))

    if log_path:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return Checkpoint(params=params, optim=state,
                      iteration=cfg.iterations_supervised,
                      config_hash=cfg.config_hash())


def stage_pseudolabel(cfg, teacher, student, dataset, out_dir):
    """Stage B: fused TTA + ensemble predictions -> entropy-filtered labels.

    Writes, for every unlabeled frame, the pseudo-label map (.lmap), the
    entropy map (.fmap) and the fused probability map (.pmap), plus a
    gamma.txt with the batch threshold.  The entropy threshold uses the
    schedule's starting drop fraction over the whole unlabeled set.
    """
    if not dataset.unlabeled:
        raise PipelineError("no unlabeled clips to pseudo-label")
    os.makedirs(out_dir, exist_ok=True)
    tta = TtaConfig(scales=tuple(cfg.tta_scales), flip=cfg.tta_flip)
    t_fn = lambda fr: model.predict_probs(teacher.params, fr)
    s_fn = lambda fr: model.predict_probs(student.params, fr)

    fused, ents = [], []
    for clip in dataset.unlabeled:
        for frame in clip.frames:
            pm = ensemble([tta_predict(t_fn, frame, tta),
                           tta_predict(s_fn, frame, tta)])
            fused.append(pm)
            ents.append(pseudolabel.entropy_map(pm))
    gamma = pseudolabel.threshold_gamma(ents, cfg.drop_fraction_start)

    k = 0
    for clip in dataset.unlabeled:
        cdir = os.path.join(out_dir, clip.clip_id)
        os.makedirs(cdir, exist_ok=True)
        for fi in range(len(clip.frames)):
            plab = pseudolabel.make_pseudo_labels(fused[k], ents[k], gamma)
            formats.write_lmap(os.path.join(cdir, "frame_%d.lmap" % fi),
                               plab.labels, cfg.num_classes)
            formats.write_fmap(os.path.join(cdir, "frame_%d.fmap" % fi), ents[k])
            formats.write_pmap(os.path.join(cdir, "frame_%d.pmap" % fi), fused[k])
            k += 1
    with open(os.path.join(out_dir, "gamma.txt"), "w") as fh:
        fh.write("0 %r %r\n" % (cfg.drop_fraction_start, gamma))
    return out_dir


def load_pseudo_labels(pseudo_dir, dataset):
    """Pseudo-label maps for every unlabeled clip, in dataset order."""
    out = []
    for clip in dataset.unlabeled:
        cdir = os.path.join(pseudo_dir, clip.clip_id)
        maps = []
        for fi in range(len(clip.frames)):
            path = os.path.join(cdir, "frame_%d.lmap" % fi)
            if not os.path.exists(path):
                raise PipelineError("missing pseudo labels for %s frame %d"
                                    % (clip.clip_id, fi))
            labels, _ = formats.read_lmap(path)
            maps.append(labels)
        out.append(maps)
    return out


def _scheduled_drop_fraction(cfg, it):
    span = max(cfg.iterations_finetune - 1, 1)
    frac = min(it / span, 1.0)
    return cfg.drop_fraction_start + frac * (cfg.drop_fraction_end - cfg.drop_fraction_start)


def select_contrastive_structure(cfg, labeled_traces, labeled_labels,
                                 unlabeled_traces, drop_fraction, rng):
    """Freeze the pixel choices for one contrastive evaluation.

    Anchors come from labeled pixels (optionally also reliable pseudo
    pixels); negatives from unreliable unlabeled pixels.  Frames are indexed
    with labeled frames first, then unlabeled.  Returns (anchor_sel,
    neg_refs, gamma, n_reliable, n_unreliable) where anchor_sel maps class ->
    (refs, prototype-unused) and neg_refs maps class -> (M,N,3) references.
    """
    n_lab = len(labeled_traces)
    u_probs = [model.softmax(tr.logits, axis=0) for tr in unlabeled_traces]
    u_ents = [pseudolabel.entropy_map(p) for p in u_probs]
    gamma = pseudolabel.threshold_gamma(u_ents, drop_fraction)

    # Anchor pool: labeled frames under their ground-truth labels.
    emb_pool = [tr.embeddings for tr in labeled_traces]
    lab_pool = list(labeled_labels)
    prob_pool = [model.softmax(tr.logits, axis=0) for tr in labeled_traces]
    frame_ids = list(range(n_lab))
    if cfg.anchor_source == "labeled+reliable":
        for ui, tr in enumerate(unlabeled_traces):
            plab = pseudolabel.make_pseudo_labels(u_probs[ui], u_ents[ui], gamma)
            emb_pool.append(tr.embeddings)
            lab_pool.append(plab.labels)
            prob_pool.append(u_probs[ui])
            frame_ids.append(n_lab + ui)
    anchors = pseudolabel.sample_anchors(emb_pool, lab_pool, prob_pool,
                                         cfg.anchors_per_class, cfg.min_prob, rng)
    # Remap pool-local frame indices to batch frame indices.
    anchor_refs = {}
    for c, (_, refs, _) in anchors.items():
        refs = refs.copy()
        refs[:, 0] = np.asarray(frame_ids)[refs[:, 0]]
        anchor_refs[c] = refs

    # Negative candidates: unreliable pixels across the unlabeled batch.
    cand = {c: [] for c in anchor_refs}
    n_unreliable = 0
    n_total = 0
    for ui, p in enumerate(u_probs):
        plab = pseudolabel.make_pseudo_labels(p, u_ents[ui], gamma)
        n_unreliable += int(np.sum(plab.labels == IGNORE))
        n_total += plab.labels.size
        per_frame = pseudolabel.select_negatives(p, plab, cfg.top_k_exclusion,
                                                 cfg.per_class_cap, rng)
        for c in cand:
            refs = per_frame.get(c)
            if refs is not None and refs.size:
                cand[c].append(np.concatenate(
                    [np.full((refs.shape[0], 1), n_lab + ui), refs], axis=1))

    neg_refs = {}
    for c, chunks in cand.items():
        m = anchor_refs[c].shape[0]
        if not chunks:
            neg_refs[c] = np.empty((m, 0, 3), dtype=np.int64)
            continue
        pool = np.concatenate(chunks, axis=0)
        picks = rng.integers(0, pool.shape[0], size=(m, cfg.negatives_per_anchor))
        neg_refs[c] = pool[picks]
    return anchor_refs, neg_refs, gamma, n_total - n_unreliable, n_unreliable


def build_contrastive_batch(cfg, traces, anchor_refs, neg_refs):
    """Gather current embeddings at the frozen pixel references."""
    classes = {}
    for c, arefs in anchor_refs.items():
        anchors = np.stack([traces[fi].embeddings[:, y, x] for fi, y, x in arefs])
        mean = anchors.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= 1e-12:
            continue
        nrefs = neg_refs[c]
        if nrefs.size:
            negs = np.stack([
                np.stack([traces[fi].embeddings[:, y, x] for fi, y, x in row])
                for row in nrefs])
        else:
            negs = np.empty((anchors.shape[0], 0, anchors.shape[1]))
        classes[c] = losses.ClassContrast(anchors=anchors, prototype=mean / norm,
                                          negatives=negs, anchor_refs=arefs,
                                          neg_refs=nrefs)
    return losses.ContrastiveBatch(classes=classes, temperature=cfg.temperature)


def finetune_losses_and_grads(cfg, params, labeled_batch, unlabeled_batch,
                              structure=None, rng=None, drop_fraction=None):
    """One fine-tune evaluation: loss report + parameter gradients.

    labeled_batch: list of (frame, labels); unlabeled_batch: list of
    (frame, pseudo_labels).  If structure is None the contrastive pixel
    choices are sampled fresh with rng at drop_fraction (defaults to the
    schedule start); passing a frozen structure makes the map
    params -> loss differentiable (used by gradient checks).
    """
    lab_traces = [model.forward(params, fr) for fr, _ in labeled_batch]
    unl_traces = [model.forward(params, fr) for fr, _ in unlabeled_batch]
    traces = lab_traces + unl_traces
    lab_labels = [lab for _, lab in labeled_batch]
    pseudo_labels = [lab for _, lab in unlabeled_batch]

    ls, d_ls, n_sup = losses.supervised_ce([t.logits for t in lab_traces], lab_labels)
    lu, d_lu, n_unsup = losses.unsupervised_ce([t.logits for t in unl_traces],
                                               pseudo_labels)

    gamma, n_rel, n_unrel = 0.0, 0, 0
    lc = 0.0
    demb = [None] * len(traces)
    n_anchors = 0
    if cfg.lambda_c > 0.0 and unl_traces:
        if structure is None:
            df = cfg.drop_fraction_start if drop_fraction is None else drop_fraction
            structure = select_contrastive_structure(
                cfg, lab_traces, lab_labels, unl_traces, df, rng)
        anchor_refs, neg_refs, gamma, n_rel, n_unrel = structure
        cbatch = build_contrastive_batch(cfg, traces, anchor_refs, neg_refs)
        lc, cgrads = losses.contrastive_loss(cbatch)
        n_anchors = sum(cc.anchors.shape[0] for cc in cbatch.classes.values())
        if cgrads:
            emb_shape = traces[0].embeddings.shape
            demb = losses.scatter_embedding_grads(cbatch, cgrads,
                                                  len(traces), emb_shape)

    total = model.zero_like_params(params)
    for i, trace in enumerate(traces):
        if i < len(lab_traces):
            dlog = d_ls[i]
        else:
            dlog = cfg.lambda_u * d_lu[i - len(lab_traces)]
        de = None if demb[i] is None else cfg.lambda_c * demb[i]
        g = model.backward(trace, dlog, de)
        for name in total:
            total[name] += g[name]

    report = losses.total_loss(ls, lu, lc, cfg.lambda_u, cfg.lambda_c,
                               n_sup_pixels=n_sup, n_unsup_pixels=n_unsup,
                               n_anchors=n_anchors)
    return report, total, gamma, n_rel, n_unrel, structure


def stage_finetune(cfg, student, dataset, pseudo_dir, log_path=None):
    """Stage C: continue training the student on labeled + pseudo data."""
    pseudo = load_pseudo_labels(pseudo_dir, dataset)
    params = {k: v.copy() for k, v in student.params.items()}
    state = student.optim
    rng = np.random.default_rng(cfg.seed + 103)
    lab_index = _labeled_frame_index(dataset)
    unl_index = [(ci, fi) for ci, clip in enumerate(dataset.unlabeled)
                 for fi in range(len(clip.frames))]
    aug = _augment_config(cfg)
    half = max(1, cfg.batch_size // 2)
    log_lines = []

    for it in range(cfg.iterations_finetune):
        labeled_batch = []
        for p in rng.integers(0, len(lab_index), size=half):
            ci, fi = lab_index[p]
            clip = dataset.labeled[ci]
            labeled_batch.append(synthdata.augment(clip.frames[fi],
                                                   clip.labels[fi], aug, rng))
        unlabeled_batch = []
        if unl_index:
            for p in rng.integers(0, len(unl_index), size=half):
                ci, fi = unl_index[p]
                clip = dataset.unlabeled[ci]
                unlabeled_batch.append(synthdata.augment(
                    clip.frames[fi], pseudo[ci][fi], aug, rng))

        report, grads, gamma, n_rel, n_unrel, _ = finetune_losses_and_grads(
            cfg, params, labeled_batch, unlabeled_batch, rng=rng,
            drop_fraction=_scheduled_drop_fraction(cfg, it))
        params, state = model.adamw_step(params, grads, state)
        log_lines.append(losses.format_log_line(it, report, gamma, n_rel, n_unrel))

    if log_path:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return Checkpoint(params=params, optim=state,
                      iteration=student.iteration + cfg.iterations_finetune,
                      config_hash=cfg.config_hash())


def predict_labels(predict_fns, frames, tta, weights=None):
    """Fused per-frame argmax predictions for one or more models."""
    out_probs, out_labels = [], []
    for frame in frames:
        members = [tta_predict(fn, frame, tta) for fn in predict_fns]
        pm = members[0] if len(members) == 1 else ensemble(members, weights)
        out_probs.append(pm)
        out_labels.append(np.argmax(pm, axis=0).astype(np.uint8))
    return out_probs, out_labels


def evaluate_models(cfg, named_models, eval_dataset):
    """MetricReport per named model on a fully labeled dataset.

    named_models: list of (name, [params, ...]) - multiple params means an
    ensemble with uniform weights.
    """
    tta = TtaConfig(scales=tuple(cfg.tta_scales), flip=cfg.tta_flip)
    gt_clips = [clip.labels for clip in eval_dataset.labeled]
    reports = {}
    for name, params_list in named_models:
        fns = [
            (lambda fr, p=p: model.predict_probs(p, fr)) for p in params_list
        ]
        pred_clips = []
        for clip in eval_dataset.labeled:
            _, labels = predict_labels(fns, clip.frames, tta)
            pred_clips.append(labels)
        reports[name] = metrics.evaluate(gt_clips, pred_clips,
                                         eval_dataset.num_classes)
    return reports


def metrics_csv(reports):
    """CSV with one metric row per model: model,metric,value."""
    lines = ["model,metric,value"]
    for name in sorted(reports):
        r = reports[name]
        lines.append("%s,miou,%r" % (name, r.miou))
        lines.append("%s,weighted_iou,%r" % (name, r.weighted_iou))
        lines.append("%s,vc8,%r" % (name, r.vc8))
        lines.append("%s,vc16,%r" % (name, r.vc16))
        for ci, iou in enumerate(r.per_class_iou):
            lines.append("%s,class_%d_iou,%r" % (name, ci, float(iou)))
    return "\n".join(lines) + "\n"


def make_eval_dataset(cfg):
    """Held-out fully labeled split, generated from an offset seed."""
    return synthdata.generate_dataset(
        cfg.num_classes, cfg.eval_clips, cfg.eval_frames_per_clip,
        cfg.height, cfg.width, 1.0, cfg.seed + 9001)


def run_all(cfg, out_dir):
    """Full pipeline: Stage A, Stage B, Stage C, then evaluation.

    Writes teacher.ckpt, student_sup.ckpt, student_semi.ckpt, the pseudo
    directory, per-stage loss logs and metrics.csv under out_dir; returns
    the per-model MetricReports.
    """
    os.makedirs(out_dir, exist_ok=True)
    dataset = synthdata.generate_dataset(
        cfg.num_classes, cfg.num_clips, cfg.frames_per_clip,
        cfg.height, cfg.width, cfg.labeled_fraction, cfg.seed)

    teacher = stage_supervised(cfg, "teacher", dataset,
                               os.path.join(out_dir, "teacher_loss.txt"))
    student = stage_supervised(cfg, "student", dataset,
                               os.path.join(out_dir, "student_loss.txt"))
    save_checkpoint(os.path.join(out_dir, "teacher.ckpt"), teacher)
    save_checkpoint(os.path.join(out_dir, "student_sup.ckpt"), student)

    pseudo_dir = os.path.join(out_dir, "pseudo")
    stage_pseudolabel(cfg, teacher, student, dataset, pseudo_dir)

    semi = stage_finetune(cfg, student, dataset, pseudo_dir,
                          os.path.join(out_dir, "finetune_loss.txt"))
    save_checkpoint(os.path.join(out_dir, "student_semi.ckpt"), semi)

    eval_dataset = make_eval_dataset(cfg)
    reports = evaluate_models(cfg, [
        ("student_sup", [student.params]),
        ("student_semi", [semi.params]),
        ("teacher", [teacher.params]),
        ("ensemble", [teacher.params, semi.params]),
    ], eval_dataset)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(reports))
    return reports
