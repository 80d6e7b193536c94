"""Run configuration: a flat `key = value` text format with # comments.

Unknown keys are rejected.  The canonical serialized text also feeds the
u32 checkpoint hash, so two runs with the same effective configuration get
matching checkpoints.
"""

import zlib
from dataclasses import dataclass, field, fields

from .exceptions import ConfigError


@dataclass
class RunConfig:
    # synthetic dataset
    num_classes: int = 5
    num_clips: int = 40
    frames_per_clip: int = 10
    height: int = 64
    width: int = 64
    labeled_fraction: float = 0.1
    # held-out evaluation split
    eval_clips: int = 6
    eval_frames_per_clip: int = 16
    # model
    teacher_width: int = 32
    student_width: int = 16
    embed_dim: int = 8
    # optimizer (desk-scale defaults; the full-scale reference recipe is
    # lr=1e-5 with 80k iterations)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 100
    # training
    iterations_supervised: int = 800
    iterations_finetune: int = 800
    batch_size: int = 4
    crop: int = 64
    augment_ratio_min: float = 0.5
    augment_ratio_max: float = 2.0
    # loss weights
    lambda_u: float = 1.0
    lambda_c: float = 0.1
    # contrastive sampling
    temperature: float = 0.5
    anchors_per_class: int = 16
    negatives_per_anchor: int = 32
    top_k_exclusion: int = 3
    per_class_cap: int = 64
    min_prob: float = 0.3
    anchor_source: str = "labeled"   # labeled | labeled+reliable
    # pseudo-label filtering
    drop_fraction_start: float = 0.20
    drop_fraction_end: float = 0.10
    # test-time augmentation
    tta_scales: tuple = (1.0,)
    tta_flip: bool = True
    # bookkeeping
    seed: int = 0

    _KEY_ALIASES = {
        "optim.lr": "lr", "optim.beta1": "beta1", "optim.beta2": "beta2",
        "optim.weight_decay": "weight_decay", "optim.warmup_steps": "warmup_steps",
        "contrastive.anchor_source": "anchor_source",
    }

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append("%s = %s" % (f.name, value))
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return zlib.crc32(self.to_text().encode("ascii")) & 0xFFFFFFFF

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _parse_value(name, raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError("key %r expects a boolean, got %r" % (name, raw))
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError("key %r expects an integer, got %r" % (name, raw))
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError("key %r expects a number, got %r" % (name, raw))
    if isinstance(current, tuple):
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError("key %r expects comma-separated numbers" % name)
    return raw


def load_config(path):
    cfg = RunConfig()
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, cfg)


def parse_config(text, cfg=None):
    cfg = cfg or RunConfig()
    known = set(cfg.field_names())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected 'key = value'" % lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        key = RunConfig._KEY_ALIASES.get(key, key)
        if key not in known:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        setattr(cfg, key, _parse_value(key, raw, getattr(cfg, key)))
    _validate(cfg)
    return cfg


def _validate(cfg):
    checks = [
        (2 <= cfg.num_classes <= 16, "num_classes in [2,16]"),
        (0.0 < cfg.labeled_fraction <= 1.0, "labeled_fraction in (0,1]"),
        (cfg.lr > 0, "lr > 0"),
        (0.0 <= cfg.beta1 < 1.0 and 0.0 <= cfg.beta2 < 1.0, "betas in [0,1)"),
        (cfg.weight_decay >= 0, "weight_decay >= 0"),
        (cfg.lambda_u >= 0 and cfg.lambda_c >= 0, "loss weights >= 0"),
        (cfg.temperature > 0, "temperature > 0"),
        (0.0 < cfg.drop_fraction_start < 1.0, "drop_fraction_start in (0,1)"),
        (0.0 < cfg.drop_fraction_end < 1.0, "drop_fraction_end in (0,1)"),
        (cfg.top_k_exclusion < cfg.num_classes, "top_k_exclusion < num_classes"),
        (len(cfg.tta_scales) > 0, "tta_scales nonempty"),
        (cfg.anchor_source in ("labeled", "labeled+reliable"), "anchor_source"),
        (cfg.batch_size >= 1, "batch_size >= 1"),
    ]
    for ok, what in checks:
        if not ok:
            raise ConfigError("config violates: %s" % what)
